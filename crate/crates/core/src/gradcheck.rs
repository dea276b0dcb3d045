//! Central-difference gradient verification.

use alloc::vec::Vec;
use core::fmt;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Coordinates where both gradients are below this magnitude are compared
/// with [`ABS_TOLERANCE`] instead of relative error.
pub const SMALL_MAGNITUDE: f64 = 1e-4;
pub const ABS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum GradCheckError {
    NonPositiveStep,
    LengthMismatch { point: usize, analytic: usize },
    /// Two evaluations at the same point disagreed.
    NonDeterministic { first: f64, second: f64 },
    Eval(TensorError),
}

impl fmt::Display for GradCheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradCheckError::NonPositiveStep => f.write_str("finite-difference step must be positive"),
            GradCheckError::LengthMismatch { point, analytic } => {
                write!(f, "point has {point} coordinates but analytic gradient has {analytic}")
            }
            GradCheckError::NonDeterministic { first, second } => {
                write!(f, "function is not deterministic: {first} then {second} at the same point")
            }
            GradCheckError::Eval(e) => write!(f, "evaluation failed: {e}"),
        }
    }
}

impl core::error::Error for GradCheckError {}

impl From<TensorError> for GradCheckError {
    fn from(e: TensorError) -> Self {
        GradCheckError::Eval(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Relative error per coordinate (absolute difference for coordinates in
    /// the small-magnitude regime).
    pub errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst_coordinate(&self) -> Option<usize> {
        self.errors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

/// Compares `analytic` against central differences of `f` at `point`.
pub fn finite_difference_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&[f64]) -> Result<f64, TensorError>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(GradCheckError::NonPositiveStep);
    }
    if point.len() != analytic.len() {
        return Err(GradCheckError::LengthMismatch { point: point.len(), analytic: analytic.len() });
    }
    let first = f(point)?;
    let second = f(point)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }

    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let mut errors = Vec::with_capacity(point.len());
    let mut max_rel = 0.0f64;
    let mut passed = true;
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        let num = (plus - minus) / (2.0 * h);
        let ana = analytic[i];
        let diff = (ana - num).abs();
        let err = if ana.abs() < SMALL_MAGNITUDE && num.abs() < SMALL_MAGNITUDE {
            if diff > ABS_TOLERANCE {
                passed = false;
            }
            diff
        } else {
            let rel = diff / ana.abs().max(num.abs());
            max_rel = max_rel.max(rel);
            if rel > tolerance {
                passed = false;
            }
            rel
        };
        numeric.push(num);
        errors.push(err);
    }
    Ok(GradCheckReport {
        analytic: analytic.to_vec(),
        numeric,
        errors,
        max_rel_error: max_rel,
        tolerance,
        passed,
    })
}

/// Checks the tape gradient of a scalar function built by `build` from a
/// single tracked input tensor.
pub fn check_tape_gradient<F>(
    build: F,
    input: &Tensor,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let root = build(&mut tape, x)?;
    let analytic = tape.backward(root)?.get_or_zeros(x).into_data();
    let shape = input.shape().to_vec();
    finite_difference_check(
        |p| {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::new(shape.clone(), p.to_vec())?);
            let root = build(&mut tape, x)?;
            Ok(tape.value(root).item())
        },
        input.data(),
        &analytic,
        h,
        tolerance,
    )
}
