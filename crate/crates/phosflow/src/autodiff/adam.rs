//! Adam with bias correction, operating on flat parameter slices.

use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update in place.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam: params {} grads {} state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::c(cfg.beta1);
    let b2 = T::c(cfg.beta2);
    let one = T::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = T::c(cfg.lr);
    let eps = T::c(cfg.eps);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.0f64, -2.0, 0.5];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(3);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        // With bias correction, the first update from zeroed state is
        // -lr * g / (|g| + eps) which is -lr*sign(g) up to eps.
        let cfg = AdamConfig::default();
        let mut p = vec![0.0f64, 0.0];
        let g = vec![3.0, -0.25];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert!((p[0] + cfg.lr).abs() < 1e-8, "{}", p[0]);
        assert!((p[1] - cfg.lr).abs() < 1e-7, "{}", p[1]);
    }

    #[test]
    fn constant_gradient_step_approaches_lr_sign() {
        // Closed-form fixed point: m-hat -> g, v-hat -> g^2, so the step
        // magnitude approaches lr regardless of |g|.
        let cfg = AdamConfig::default();
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1);
        let g = vec![0.037];
        let mut last = p[0];
        for _ in 0..500 {
            last = p[0];
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        let step = (p[0] - last).abs();
        assert!((step - cfg.lr).abs() < 1e-6, "step {}", step);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut p = vec![0.0f64; 2];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut p, &g, &mut st, &AdamConfig::default()).is_err());
    }
}
