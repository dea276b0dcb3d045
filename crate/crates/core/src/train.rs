//! Two-phase training: Adam over named parameters with a freeze mask,
//! batch-composition driven prompt weighting and per-epoch loss curves.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::deprompt::{resolve_weight, BatchComposition, DePromptError, Phase, PromptWeight};
use crate::loss::{detection_loss, ClassSplit, GroundTruth, LossConfig, LossError};
use crate::math;
use crate::model::{ConfigError, Detector, ModelError};
use crate::nn::{ParamStore, Session};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tape::Var;
use crate::tensor::{Tensor, TensorError};

/// One training or evaluation image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor,
    pub gt: GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: 1.0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(ConfigError::new("optimizer.beta1", "betas must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(ConfigError::new("optimizer.eps", "must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(ConfigError::new("optimizer.grad_clip", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    /// Upper bound on epochs.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Stop after this many epochs without relative improvement of
    /// `min_delta`; `0` disables early stopping.
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig { epochs: 20, lr: 1e-3, batch_size: 4, patience: 3, min_delta: 0.01 }
    }
}

impl PhaseConfig {
    pub fn validate(&self, field: &'static str) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::new(field, "batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::new(field, "lr must be positive"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(ConfigError::new(field, "min_delta must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    BasePretrain,
    FineTune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPhasePlan {
    pub phase: PhaseKind,
    /// Parameters whose names start with any of these stay constant.
    pub frozen_prefixes: Vec<String>,
    pub config: PhaseConfig,
    pub seed: u64,
}

impl TrainPhasePlan {
    pub fn base_pretrain(config: PhaseConfig, seed: u64) -> Self {
        TrainPhasePlan { phase: PhaseKind::BasePretrain, frozen_prefixes: Vec::new(), config, seed }
    }

    pub fn fine_tune(config: PhaseConfig, seed: u64) -> Self {
        TrainPhasePlan {
            phase: PhaseKind::FineTune,
            frozen_prefixes: alloc::vec![crate::model::BACKBONE_PREFIX.to_string()],
            config,
            seed,
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    NonFinite { epoch: usize, step: usize, last_loss: Option<f64>, detail: String },
    Model(ModelError),
    Loss(LossError),
    Prompt(DePromptError),
    EmptyData,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NonFinite { epoch, step, last_loss, detail } => {
                write!(f, "non-finite value at epoch {epoch}, step {step}: {detail}")?;
                match last_loss {
                    Some(l) => write!(f, " (last finite loss {l})"),
                    None => Ok(()),
                }
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Loss(e) => write!(f, "{e}"),
            TrainError::Prompt(e) => write!(f, "{e}"),
            TrainError::EmptyData => f.write_str("no training examples"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}

impl From<DePromptError> for TrainError {
    fn from(e: DePromptError) -> Self {
        TrainError::Prompt(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
            | TrainError::Loss(LossError::Tensor(TensorError::NonFinite { .. }))
            | TrainError::Loss(crate::loss::LossError::Match(crate::matching::MatchError::NonFiniteCost))
            | TrainError::Prompt(DePromptError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Adam without weight decay: a parameter whose gradient has always been
/// zero never moves.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    config: OptimizerConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: OptimizerConfig) -> Self {
        Adam { config, ..Default::default() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - math::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - math::pow(c.beta2, self.t as f64);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| alloc::vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| alloc::vec![0.0; g.len()]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / (math::sqrt(*vi / bc2) + c.eps);
                *x -= lr * update;
            }
        }
    }
}

/// Instance counts of the whole batch; `None` when it has no objects.
pub fn batch_composition(batch: &[&Example]) -> Option<BatchComposition> {
    let base = batch.iter().map(|e| e.gt.count(ClassSplit::Base)).sum();
    let novel = batch.iter().map(|e| e.gt.count(ClassSplit::Novel)).sum();
    BatchComposition::new(base, novel).ok()
}

/// Total loss of one image on an open session: fused output plus
/// auxiliary losses on all six decoder layers.
pub fn image_loss(
    detector: &Detector,
    s: &mut Session,
    example: &Example,
    w: PromptWeight,
    loss: &LossConfig,
) -> Result<Var, TrainError> {
    let out = detector.forward(s, &example.image, w)?;
    let layers = out
        .decoder_outputs
        .iter()
        .map(|&d| detector.predict(s, d))
        .collect::<Result<Vec<_>, _>>()?;
    let fused = detector.predict(s, out.fused)?;
    Ok(detection_loss(&mut s.tape, &layers, fused, &example.gt, loss)?)
}

/// The prompt weight used for a training batch. Batches without objects
/// fall back to the evaluation weight.
pub fn training_weight(detector: &Detector, batch: &[&Example]) -> Result<PromptWeight, DePromptError> {
    let strategy = detector.config().deprompt.strategy();
    match batch_composition(batch) {
        Some(comp) => resolve_weight(strategy, Some(&comp), Phase::Train),
        None => resolve_weight(strategy, None, Phase::Eval),
    }
}

/// Mean loss over the batch and the mean gradient of every trainable
/// parameter.
pub fn batch_loss_and_grads(
    detector: &Detector,
    params: &ParamStore,
    batch: &[&Example],
    loss: &LossConfig,
    trainable: &dyn Fn(&str) -> bool,
    dropout_seed: u64,
) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
    let w = training_weight(detector, batch)?;
    let scale = 1.0 / batch.len() as f64;
    let p = detector.config().model.dropout;
    let mut total = 0.0;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for (k, ex) in batch.iter().enumerate() {
        let mut s = params.bind(trainable).with_dropout(p, rng_for(dropout_seed, stream::DROPOUT, k as u64));
        let l = image_loss(detector, &mut s, ex, w, loss)?;
        total += s.tape.value(l).item() * scale;
        let grads = s.tape.backward(l)?;
        for (name, g) in s.param_grads(&grads) {
            match acc.get_mut(&name) {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y * scale;
                    }
                }
                None => {
                    let data = g.data().iter().map(|y| y * scale).collect();
                    acc.insert(name, Tensor::from_parts(g.shape().to_vec(), data));
                }
            }
        }
    }
    Ok((total, acc))
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = math::sqrt(grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Mean batch loss of each completed epoch.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
    pub stopped_early: bool,
}

fn largest_parameter(params: &ParamStore) -> String {
    let mut best = (String::new(), 0.0f64);
    for (name, t) in params.iter() {
        for &x in t.data() {
            if !x.is_finite() || x.abs() > best.1 {
                best = (name.clone(), if x.is_finite() { x.abs() } else { f64::INFINITY });
            }
        }
    }
    format!("largest |parameter| {} in {}", best.1, best.0)
}

/// Trains `params` in place on `data` according to `plan`.
pub fn run_training(
    detector: &Detector,
    params: &mut ParamStore,
    data: &[Example],
    plan: &TrainPhasePlan,
    optimizer: &OptimizerConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let cfg = plan.config;
    let mut adam = Adam::new(*optimizer);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut steps = 0;
    let mut stopped_early = false;
    let trainable = |name: &str| !plan.is_frozen(name);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(plan.seed, stream::SHUFFLE, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let dropout_seed = derive_seed(plan.seed, stream::DROPOUT, steps as u64);
            let last_loss = curve.last().copied();
            let diag = |detail: String| TrainError::NonFinite { epoch, step: steps, last_loss, detail };
            let (l, mut grads) = match batch_loss_and_grads(detector, params, &batch, loss, &trainable, dropout_seed) {
                Ok(r) => r,
                Err(e) if is_non_finite(&e) => return Err(diag(format!("{e}; {}", largest_parameter(params)))),
                Err(e) => return Err(e),
            };
            if !l.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(diag(format!("loss {l}; {}", largest_parameter(params))));
            }
            clip_global_norm(&mut grads, optimizer.grad_clip);
            adam.step(params, &grads, cfg.lr);
            epoch_loss += l;
            batches += 1;
            steps += 1;
        }
        let mean = epoch_loss / batches as f64;
        curve.push(mean);
        if mean < best * (1.0 - cfg.min_delta) {
            best = mean;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { loss_curve: curve, steps, stopped_early })
}
