//! Dense row-major tensors over a generic real scalar.

use crate::{Error, Result};

/// Scalar element type for tensors and graphs.
///
/// `f32` is used for training; the identical graph code instantiated at `f64`
/// is used for gradient verification and for oracle comparisons, where single
/// precision would blur the tolerances being tested.
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::NumAssign
    + Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Round half-way cases to the nearest even integer (IEEE `roundTiesToEven`).
    fn round_ties_even_(self) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn round_ties_even_(self) -> Self {
        self.round_ties_even()
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn round_ties_even_(self) -> Self {
        self.round_ties_even()
    }
}

/// A dense tensor: row-major contiguous data plus a shape.
///
/// Invariants enforced at construction: every extent is at least 1 and the
/// product of extents equals the element count. Rank-3 image tensors use
/// height x width x channels order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
}

impl<E: Real> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "tensor extents must all be >= 1, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        Self::new(shape, vec![E::zero(); len])
    }

    pub fn full(shape: &[usize], v: E) -> Result<Self> {
        let len: usize = shape.iter().product();
        Self::new(shape, vec![v; len])
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Result<Self> {
        let len: usize = shape.iter().product();
        Self::new(shape, (0..len).map(|i| f(i)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are >= 1 by construction
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Builder-style marker used when a tensor becomes a trainable graph leaf.
    pub fn with_requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn set_requires_grad(&mut self, yes: bool) {
        self.requires_grad = yes;
    }

    /// Reinterpret the same data under a new shape with an equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    /// Convert the element type (used to run a training-precision model under
    /// the `f64` verification mode and back).
    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    /// Flat index for a rank-3 (h, w, c) tensor.
    #[inline]
    pub fn idx3(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape[1] + x) * self.shape[2] + c
    }

    /// Value accessor for rank-3 tensors; bounds-checked in debug builds only.
    #[inline]
    pub fn at3(&self, y: usize, x: usize, c: usize) -> E {
        self.data[self.idx3(y, x, c)]
    }

    /// Largest absolute difference between two same-shaped tensors.
    pub fn max_abs_diff(&self, other: &Self) -> E {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(E::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extents_and_length_mismatch() {
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn reshape_preserves_data_and_checks_len() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32).unwrap();
        let r = t.clone().reshaped(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn round_ties_even_matches_ieee() {
        assert_eq!(0.5f64.round_ties_even_(), 0.0);
        assert_eq!(1.5f64.round_ties_even_(), 2.0);
        assert_eq!(2.5f64.round_ties_even_(), 2.0);
        assert_eq!((-0.5f64).round_ties_even_(), 0.0);
        assert_eq!((-1.5f32).round_ties_even_(), -2.0);
        assert_eq!(0.49999f32.round_ties_even_(), 0.0);
    }
}
