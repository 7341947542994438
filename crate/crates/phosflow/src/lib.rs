//! Stimulus optimization for epiretinal implants.
//!
//! The crate brings together a phosphene forward simulator (axon map model),
//! invertible flow encoders (an INN trained with MSE+MMD and a conditional
//! INN trained by likelihood), three baseline encoders, dataset plumbing,
//! and the evaluation harness that scores simulator-rendered percepts of
//! optimized stimuli against target images.

pub mod autodiff;
pub mod error;
pub mod rng;

pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod flows;
pub mod losses;
pub mod pgm;
pub mod phosim;

pub mod baselines;




pub mod pipeline;

pub use error::{Error, Result};
