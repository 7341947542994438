//! Finite-difference validation of analytic gradients.

use super::tape::{Tape, Vid};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central difference, elementwise:
/// |analytic - central| / (|central| + 1e-12).
///
/// `f` must build a scalar from the single parameter leaf it is given.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Vid) -> Result<Vid>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = f(&mut tape, xv)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                tape.value(out).shape()
            )));
        }
        tape.backward(out)?;
        tape.grad(xv)
            .ok_or_else(|| Error::contract("function ignored its input"))?
            .to_vec()
    };

    let eval = |pt: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(pt.clone());
        let out = f(&mut tape, xv)?;
        Ok(tape.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (hi - lo) / (2.0 * eps);
        let err = (analytic[i] - central).abs() / (central.abs() + 1e-12);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
