//! Dense tensors: flat storage plus shape metadata.
//!
//! The element type is generic over [`Real`] so the same model code runs at
//! f32 for training and f64 for verification.

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Element type code used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

/// Floating-point element trait for the engine.
pub trait Real:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn c(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    #[inline(always)]
    fn c(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    #[inline(always)]
    fn c(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
}

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::contract(format!(
                "element count {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                count
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); count],
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let count = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; count],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::c(v)).collect())
    }

    /// i.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, stream: &mut Stream) -> Self {
        let count: usize = shape.iter().product();
        let data = (0..count).map(|_| T::c(stream.normal() * std)).collect();
        Tensor { shape, data }
    }

    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, stream: &mut Stream) -> Self {
        let count: usize = shape.iter().product();
        let data = (0..count).map(|_| T::c(stream.uniform(lo, hi))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != self.data.len() {
            return Err(Error::contract(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Number of rows when viewed as [rows, last-extent].
    pub fn rows(&self) -> usize {
        match self.shape.last() {
            Some(&last) if last > 0 => self.data.len() / last,
            _ => 1,
        }
    }

    /// Last-axis extent (1 for scalars).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    /// Cast to another element precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::c(v.f64())).collect(),
        }
    }
}

/// Append zeros so the vector reaches width `dim`; the inverse is truncation.
pub fn pad_to_dim<T: Real>(x: &[T], dim: usize) -> Result<Vec<T>> {
    if x.len() > dim {
        return Err(Error::contract(format!(
            "cannot pad width {} down to {}",
            x.len(),
            dim
        )));
    }
    let mut out = x.to_vec();
    out.resize(dim, T::zero());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_element_count_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn pad_matches_spec_examples() {
        let x = vec![1.0f32; 81];
        let padded = pad_to_dim(&x, 784).unwrap();
        assert_eq!(padded.len(), 784);
        assert!(padded[81..].iter().all(|&v| v == 0.0));
        // d_in == D is the identity
        assert_eq!(pad_to_dim(&x, 81).unwrap(), x);
        // truncate(pad(x)) == x
        assert_eq!(&padded[..81], &x[..]);
        // d_in > D is a contract error
        assert!(pad_to_dim(&x, 80).is_err());
    }
}
