//! Dense row-major `f64` tensors and the error type shared by all tensor ops.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Tensor dimensions, outermost first.
pub type Shape = Vec<usize>;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operand shapes cannot be combined by the named op.
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    /// `data.len()` disagrees with the product of the shape.
    DataLength { shape: Shape, len: usize },
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    /// An operation produced NaN or infinity from its inputs.
    NonFinite { op: &'static str },
    NonScalarRoot { shape: Shape },
    IndexOutOfBounds { op: &'static str, index: usize, len: usize },
    Invalid(&'static str),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::DataLength { shape, len } => {
                write!(f, "shape {shape:?} needs {} values, got {len}", numel(shape))
            }
            TensorError::InvalidAxis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            TensorError::NonScalarRoot { shape } => {
                write!(f, "backward needs a scalar root, got shape {shape:?}")
            }
            TensorError::IndexOutOfBounds { op, index, len } => {
                write!(f, "{op}: index {index} out of bounds for length {len}")
            }
            TensorError::Invalid(msg) => f.write_str(msg),
        }
    }
}

impl core::error::Error for TensorError {}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense tensor value. Gradient tracking lives on the [`Tape`](crate::Tape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if shape.contains(&0) || numel(&shape) != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Shape>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(TensorError::DataLength { shape, len: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }
}

/// Broadcast shape of two operands under trailing-dimension alignment.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Shape, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { .. })
        ));
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("add", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("add", &[2, 1], &[1, 4]).unwrap(), vec![2, 4]);
        assert_eq!(broadcast_shape("add", &[1], &[5, 2]).unwrap(), vec![5, 2]);
        let err = broadcast_shape("add", &[2, 3], &[4]).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch { op: "add", lhs: vec![2, 3], rhs: vec![4] }
        );
    }
}
