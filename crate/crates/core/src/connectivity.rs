//! Encoder to decoder connections and adaptive decoder fusion.
//!
//! Memory index 0 is the encoder input (post-prompt tokens), 1..=6 are the
//! encoder layer outputs. Decoder layer `j` (1-based) receives:
//!
//! * baseline: memory 6
//! * learnable skip: `sum_{i=1..6} softmax_i(A)[i, j] * memory i`
//! * soft skip: `a * memory 6 + (1 - a) * memory (6 - j)`
//!
//! The final decoder feature is either layer 6 alone or
//! `sum_j softmax(B)[j] * decoder output j`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::nn::{ParamStore, Session};
use crate::tape::{softmax_values, Var};
use crate::tensor::{Tensor, TensorError};

pub const LAYERS: usize = 6;
pub const SKIP_PARAM: &str = "connectivity.skip_logits";
pub const FUSION_PARAM: &str = "connectivity.fusion_logits";
/// Initial logit on the last encoder row of the skip matrix.
pub const SKIP_INIT_LOGIT: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    Baseline,
    LearnableSkip,
    SoftSkip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    LastLayerOnly,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConnectivityConfig {
    pub mode: SkipMode,
    /// Fixed mixing coefficient for the soft skip.
    pub a_scalar: f64,
    pub fusion: Fusion,
}

impl Default for ConnectivityConfig {
    fn default() -> Self {
        ConnectivityConfig { mode: SkipMode::Baseline, a_scalar: 0.5, fusion: Fusion::LastLayerOnly }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConnectivityError {
    WrongCount { expected: usize, got: usize },
    ShapeDisagreement { index: usize },
    ScalarOutOfRange(f64),
    Tensor(TensorError),
}

impl fmt::Display for ConnectivityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConnectivityError::WrongCount { expected, got } => write!(f, "expected {expected} tensors, got {got}"),
            ConnectivityError::ShapeDisagreement { index } => write!(f, "tensor {index} differs in shape from tensor 0"),
            ConnectivityError::ScalarOutOfRange(a) => write!(f, "soft skip coefficient {a} outside [0, 1]"),
            ConnectivityError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ConnectivityError {}

impl From<TensorError> for ConnectivityError {
    fn from(e: TensorError) -> Self {
        ConnectivityError::Tensor(e)
    }
}

impl ConnectivityConfig {
    pub fn validate(&self) -> Result<(), ConnectivityError> {
        if !(0.0..=1.0).contains(&self.a_scalar) {
            return Err(ConnectivityError::ScalarOutOfRange(self.a_scalar));
        }
        Ok(())
    }

    /// Learnable scalars added on top of the baseline detector.
    pub fn extra_parameters(&self) -> usize {
        let skip = if self.mode == SkipMode::LearnableSkip { LAYERS * LAYERS } else { 0 };
        let fusion = if self.fusion == Fusion::Adaptive { LAYERS } else { 0 };
        skip + fusion
    }

    pub fn init_params(&self, store: &mut ParamStore) {
        if self.mode == SkipMode::LearnableSkip {
            let mut a = Tensor::zeros(alloc::vec![LAYERS, LAYERS]);
            for j in 0..LAYERS {
                a.data_mut()[(LAYERS - 1) * LAYERS + j] = SKIP_INIT_LOGIT;
            }
            store.insert(SKIP_PARAM, a);
        }
        if self.fusion == Fusion::Adaptive {
            store.insert(FUSION_PARAM, Tensor::zeros(alloc::vec![LAYERS]));
        }
    }
}

/// Index `i` of the encoder memory paired with decoder layer `j` (1-based)
/// by the soft skip.
pub fn soft_skip_source(j: usize) -> usize {
    LAYERS - j
}

/// Column-normalized skip weights `[encoder i, decoder j]` (rows are encoder
/// layers 1..=6).
pub fn normalized_skip(logits: &Tensor) -> Tensor {
    Tensor::from_parts(logits.shape().to_vec(), softmax_values(logits.data(), logits.shape(), 0))
}

pub fn normalized_fusion(logits: &Tensor) -> Tensor {
    Tensor::from_parts(logits.shape().to_vec(), softmax_values(logits.data(), logits.shape(), 0))
}

fn check_same_shape(s: &Session, xs: &[Var]) -> Result<(), ConnectivityError> {
    let first = s.tape.shape(xs[0]);
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if s.tape.shape(x) != first {
            return Err(ConnectivityError::ShapeDisagreement { index: i });
        }
    }
    Ok(())
}

/// Builds the six decoder memories from memories `0..=6`.
pub fn memories_for_decoder(
    s: &mut Session,
    config: &ConnectivityConfig,
    memories: &[Var],
) -> Result<Vec<Var>, ConnectivityError> {
    if memories.len() != LAYERS + 1 {
        return Err(ConnectivityError::WrongCount { expected: LAYERS + 1, got: memories.len() });
    }
    check_same_shape(s, memories)?;
    let last = memories[LAYERS];
    match config.mode {
        SkipMode::Baseline => Ok(alloc::vec![last; LAYERS]),
        SkipMode::SoftSkip => {
            config.validate()?;
            let a = config.a_scalar;
            let mut out = Vec::with_capacity(LAYERS);
            for j in 1..=LAYERS {
                let hi = s.tape.scale(last, a)?;
                let lo = s.tape.scale(memories[soft_skip_source(j)], 1.0 - a)?;
                out.push(s.tape.add(hi, lo)?);
            }
            Ok(out)
        }
        SkipMode::LearnableSkip => {
            let logits = s.var(SKIP_PARAM)?;
            let weights = s.tape.softmax(logits, 0)?;
            let mut out = Vec::with_capacity(LAYERS);
            for j in 0..LAYERS {
                let mut acc: Option<Var> = None;
                for i in 0..LAYERS {
                    let w = s.tape.element(weights, i * LAYERS + j)?;
                    let term = s.tape.mul(memories[i + 1], w)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => s.tape.add(a, term)?,
                    });
                }
                out.push(acc.expect("six terms"));
            }
            Ok(out)
        }
    }
}

/// Combines the six decoder outputs into the final decoder feature.
pub fn fuse_decoder_outputs(s: &mut Session, fusion: Fusion, outputs: &[Var]) -> Result<Var, ConnectivityError> {
    if outputs.len() != LAYERS {
        return Err(ConnectivityError::WrongCount { expected: LAYERS, got: outputs.len() });
    }
    check_same_shape(s, outputs)?;
    match fusion {
        Fusion::LastLayerOnly => Ok(outputs[LAYERS - 1]),
        Fusion::Adaptive => {
            let logits = s.var(FUSION_PARAM)?;
            let weights = s.tape.softmax(logits, 0)?;
            let mut acc: Option<Var> = None;
            for (j, &o) in outputs.iter().enumerate() {
                let w = s.tape.element(weights, j)?;
                let term = s.tape.mul(o, w)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => s.tape.add(a, term)?,
                });
            }
            Ok(acc.expect("six terms"))
        }
    }
}

/// Current connection weights in readable form.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionWeights {
    pub mode: SkipMode,
    pub fusion: Fusion,
    /// `[encoder i][decoder j]`, present for the learnable skip.
    pub skip: Option<Tensor>,
    pub a_scalar: f64,
    pub fusion_weights: Option<Tensor>,
    pub parameter_delta: usize,
}

pub fn connection_weights(config: &ConnectivityConfig, params: &ParamStore) -> ConnectionWeights {
    ConnectionWeights {
        mode: config.mode,
        fusion: config.fusion,
        skip: params.get(SKIP_PARAM).filter(|_| config.mode == SkipMode::LearnableSkip).map(normalized_skip),
        a_scalar: config.a_scalar,
        fusion_weights: params.get(FUSION_PARAM).filter(|_| config.fusion == Fusion::Adaptive).map(normalized_fusion),
        parameter_delta: config.extra_parameters(),
    }
}

/// Human-readable table of the normalized connection weights.
pub fn report_connection_weights(config: &ConnectivityConfig, params: &ParamStore) -> String {
    let w = connection_weights(config, params);
    let mut out = String::new();
    let _ = writeln!(out, "mode: {:?}", w.mode);
    let _ = writeln!(out, "fusion: {:?}", w.fusion);
    let _ = writeln!(out, "a_scalar: {}", w.a_scalar);
    let _ = writeln!(out, "parameter_delta: {}", w.parameter_delta);
    if let Some(skip) = &w.skip {
        let _ = writeln!(out, "skip_weights (rows: encoder layer 1-6, cols: decoder layer 1-6):");
        for i in 0..LAYERS {
            let row: Vec<String> = (0..LAYERS).map(|j| format!("{:.4}", skip.data()[i * LAYERS + j])).collect();
            let _ = writeln!(out, "  E{} | {}", i + 1, row.join(" "));
        }
    }
    if let Some(b) = &w.fusion_weights {
        let row: Vec<String> = b.data().iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(out, "fusion_weights (decoder layer 1-6): {}", row.join(" "));
    }
    out
}
