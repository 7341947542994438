//! Dense-array engine with reverse-mode automatic differentiation.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use tape::{Tape, Vid};
pub use tensor::{pad_to_dim, Dtype, Real, Tensor};
