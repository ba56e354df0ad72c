//! Scalar abstraction and named parameter collections.
//!
//! The training engine is generic over [`Scalar`] so the same code runs in
//! `f32` for real workloads and in `f64` for finite-difference gradient
//! checks. Reductions (dot products, norms) always accumulate in `f64`
//! regardless of the storage type.

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::Float;

use crate::error::{Error, Result};

/// Dynamic-rank tensor used for activations, patterns and parameters.
pub type Tensor<F = f32> = ArrayD<F>;

/// Floating-point element type the engine can train in.
pub trait Scalar:
    LinalgScalar
    + Float
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}

/// An ordered collection of named tensors.
///
/// Order is insertion order and is part of the contract: optimizers walk
/// parameters positionally and checkpoints serialize entries in order.
/// The set also acts as a vector in parameter space (`dot`, `axpy`, ...),
/// which is what the conjugate-gradient and influence code operate on.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F = f32> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Adds a named tensor; names must be unique within the set.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Shape(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// A set with the same names and shapes, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.raw_dim())))
                .collect(),
        }
    }

    /// Converts element storage (e.g. `f32` -> `f64` for gradient checks).
    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.mapv(|v| G::from_f64(v.into_f64()))))
                .collect(),
        }
    }

    fn check_same_layout(&self, other: &Self, op: &str) {
        assert_eq!(self.len(), other.len(), "{op}: parameter sets differ in entry count");
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            assert_eq!(na, nb, "{op}: parameter name mismatch");
            assert_eq!(ta.shape(), tb.shape(), "{op}: shape mismatch for `{na}`");
        }
    }

    /// Inner product in parameter space, accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> f64 {
        self.check_same_layout(other, "dot");
        let mut acc = 0.0f64;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            for (x, y) in a.iter().zip(b.iter()) {
                acc += x.into_f64() * y.into_f64();
            }
        }
        acc
    }

    /// Euclidean norm in parameter space.
    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &Self) {
        self.check_same_layout(x, "axpy");
        let a = F::from_f64(a);
        for ((_, dst), (_, src)) in self.entries.iter_mut().zip(&x.entries) {
            ndarray::Zip::from(dst).and(src).for_each(|d, &s| *d = *d + a * s);
        }
    }

    /// `self *= a`.
    pub fn scale(&mut self, a: f64) {
        let a = F::from_f64(a);
        for (_, t) in self.entries.iter_mut() {
            t.mapv_inplace(|v| v * a);
        }
    }

    /// Returns true when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Concatenates all elements into one `f64` vector (entry order).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, t) in &self.entries {
            out.extend(t.iter().map(|v| v.into_f64()));
        }
        out
    }

    /// Writes a flat vector produced by [`ParamSet::to_flat`] back into the set.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "flat vector has {} elements, parameter set has {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.entries.iter_mut() {
            for dst in t.iter_mut() {
                *dst = F::from_f64(flat[offset]);
                offset += 1;
            }
        }
        Ok(())
    }
}
