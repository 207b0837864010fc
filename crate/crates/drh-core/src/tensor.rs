//! Dense row-major tensor. Activations are N x C x H x W, conv weights
//! O x I x kh x kw, matrices rows x cols.
//!
//! Training runs in `f32`; gradient checking re-instantiates everything in
//! `f64`, so the whole numeric stack is generic over [`Element`].

use crate::error::{Error, Result};

/// Scalar element for tensors: `f32` for training, `f64` for gradient checks.
pub trait Element:
    num_traits::Float + num_traits::NumAssignOps + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{expected} elements for shape {shape:?}"),
                &[data.len()],
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Flat index for a rank-4 tensor.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    /// Flat index for a rank-2 tensor.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> usize {
        r * self.shape[1] + c
    }

    /// Row `r` of a rank-2 tensor.
    #[inline]
    pub fn row(&self, r: usize) -> &[E] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [E] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    pub fn fill(&mut self, value: E) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Frobenius norm squared.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }

    /// Elementwise `self += other`, shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor<E>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "tensor add",
                format!("shape {:?}", self.shape),
                &other.shape,
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// Convert element type (used when freezing `f64` nets to `f32` files).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f32>::from_vec(&[2, 1, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.data()[t.at4(1, 0, 1, 0)], 6.0);
        let m = Tensor::<f32>::from_vec(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn finiteness_check() {
        let mut t = Tensor::<f32>::zeros(&[4]);
        assert!(t.check_finite("t").is_ok());
        t.data_mut()[2] = f32::NAN;
        assert!(matches!(
            t.check_finite("t"),
            Err(Error::NonFinite { .. })
        ));
    }
}
