//! Fixed 2D sinusoidal positional embedding.
//!
//! The first half of the channels encodes the row index, the second half the
//! column index; within each half channels alternate `sin`/`cos` at
//! geometrically spaced frequencies.

use alloc::vec::Vec;

use crate::math;
use crate::tensor::{Tensor, TensorError};

const TEMPERATURE: f64 = 10_000.0;

/// Embedding for a `rows x cols` token grid, shape `[rows * cols, d_model]`,
/// tokens in row-major order. `d_model` must be a multiple of 4.
pub fn sinusoidal_2d(rows: usize, cols: usize, d_model: usize) -> Result<Tensor, TensorError> {
    if d_model == 0 || !d_model.is_multiple_of(4) {
        return Err(TensorError::Invalid("2D sinusoidal embedding needs d_model divisible by 4"));
    }
    let half = d_model / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|k| 1.0 / math::pow(TEMPERATURE, (2 * k) as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(rows * cols * d_model);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                for &w in &freqs {
                    data.push(math::sin(pos * w));
                    data.push(math::cos(pos * w));
                }
            }
        }
    }
    Tensor::new(alloc::vec![rows * cols, d_model], data)
}
