//! Allocation-only core of the decoupled detection transformer.
//!
//! Everything in this crate is pure computation: a small reverse-mode
//! autodiff engine, the detector graph (patch backbone, six-layer encoder and
//! decoder, prediction heads), the base/novel decoupled prompt, encoder to
//! decoder skip connections, adaptive decoder fusion, the set-matching loss,
//! the synthetic few-shot protocol and an AP evaluator. File formats, the run
//! registry and the CLI live in the `dedetr` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod boxes;
pub mod connectivity;
pub mod deprompt;
pub mod eval;
pub mod fewshot;
pub mod gradcheck;
pub mod loss;
pub mod matching;
mod math;
pub mod model;
pub mod nn;
pub mod posenc;
pub mod protocol;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor, TensorError};
