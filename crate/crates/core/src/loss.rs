//! Set-prediction objective: bipartite matching of predictions to ground
//! truth, then cross-entropy, L1 and GIoU terms, with auxiliary losses on
//! every decoder layer.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::boxes::{giou, giou_rows, BoxCxcywh, DegenerateBox};
use crate::matching::{hungarian_match, MatchError, MatchResult};
use crate::model::{ConfigError, PredictionVars};
use crate::tape::{softmax_values, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub aux_coeff: f64,
    /// Cross-entropy weight of queries supervised toward "no object".
    pub no_object_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { cls: 1.0, l1: 5.0, giou: 2.0, aux_coeff: 1.0, no_object_weight: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("loss.cls", self.cls),
            ("loss.l1", self.l1),
            ("loss.giou", self.giou),
            ("loss.aux_coeff", self.aux_coeff),
            ("loss.no_object_weight", self.no_object_weight),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError::new(name, "must be a finite non-negative number"));
            }
        }
        if self.no_object_weight == 0.0 {
            return Err(ConfigError::new("loss.no_object_weight", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSplit {
    Base,
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub class_id: usize,
    pub bbox: BoxCxcywh,
    pub split: ClassSplit,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub objects: Vec<GtObject>,
}

impl GroundTruth {
    pub fn new(objects: Vec<GtObject>) -> Self {
        GroundTruth { objects }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn count(&self, split: ClassSplit) -> usize {
        self.objects.iter().filter(|o| o.split == split).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Layer(usize),
    Fused,
}

/// Plain-value predictions: logits `[Q, C + 1]`, boxes `[Q, 4]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub logits: Tensor,
    pub boxes: Tensor,
    pub provenance: Provenance,
}

impl DetectionSet {
    pub fn from_vars(tape: &Tape, pred: PredictionVars, provenance: Provenance) -> Self {
        DetectionSet { logits: tape.value(pred.logits).clone(), boxes: tape.value(pred.boxes).clone(), provenance }
    }

    pub fn len(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the "no object" column.
    pub fn background(&self) -> usize {
        self.logits.shape()[1] - 1
    }

    pub fn probabilities(&self) -> Tensor {
        Tensor::from_parts(self.logits.shape().to_vec(), softmax_values(self.logits.data(), self.logits.shape(), 1))
    }

    pub fn box_at(&self, q: usize) -> BoxCxcywh {
        let r = self.boxes.row(q);
        BoxCxcywh::new(r[0], r[1], r[2], r[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    Match(MatchError),
    Degenerate(DegenerateBox),
    Tensor(TensorError),
    ClassOutOfRange { class_id: usize, classes: usize },
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::Match(e) => write!(f, "matching: {e}"),
            LossError::Degenerate(e) => write!(f, "{e}"),
            LossError::Tensor(e) => write!(f, "{e}"),
            LossError::ClassOutOfRange { class_id, classes } => {
                write!(f, "ground-truth class {class_id} outside {classes} foreground classes")
            }
        }
    }
}

impl core::error::Error for LossError {}

impl From<MatchError> for LossError {
    fn from(e: MatchError) -> Self {
        LossError::Match(e)
    }
}

impl From<DegenerateBox> for LossError {
    fn from(e: DegenerateBox) -> Self {
        LossError::Degenerate(e)
    }
}

impl From<TensorError> for LossError {
    fn from(e: TensorError) -> Self {
        LossError::Tensor(e)
    }
}

/// Matching cost `[n_gt][n_queries]`.
pub fn pairwise_cost(pred: &DetectionSet, gt: &GroundTruth, cfg: &LossConfig) -> Result<Vec<Vec<f64>>, LossError> {
    let probs = pred.probabilities();
    let classes = pred.background();
    let mut cost = Vec::with_capacity(gt.len());
    for obj in &gt.objects {
        if obj.class_id >= classes {
            return Err(LossError::ClassOutOfRange { class_id: obj.class_id, classes });
        }
        let mut row = Vec::with_capacity(pred.len());
        for q in 0..pred.len() {
            let b = pred.box_at(q);
            let c = -cfg.cls * probs.row(q)[obj.class_id] + cfg.l1 * b.l1(&obj.bbox) - cfg.giou * giou(&b, &obj.bbox)?;
            row.push(c);
        }
        cost.push(row);
    }
    Ok(cost)
}

pub fn match_predictions(pred: &DetectionSet, gt: &GroundTruth, cfg: &LossConfig) -> Result<MatchResult, LossError> {
    Ok(hungarian_match(&pairwise_cost(pred, gt, cfg)?)?)
}

/// Loss of one prediction set against one image's ground truth. The
/// assignment is computed on values and treated as a constant.
pub fn set_loss(tape: &mut Tape, pred: PredictionVars, gt: &GroundTruth, cfg: &LossConfig) -> Result<Var, LossError> {
    let values = DetectionSet::from_vars(tape, pred, Provenance::Fused);
    let matched = match_predictions(&values, gt, cfg)?;
    let n_q = values.len();
    let background = values.background();

    let mut targets = vec![background; n_q];
    let mut weights = vec![cfg.no_object_weight; n_q];
    for (g, &q) in matched.assignment.iter().enumerate() {
        targets[q] = gt.objects[g].class_id;
        weights[q] = 1.0;
    }
    let weight_sum: f64 = weights.iter().sum();
    let log_probs = tape.log_softmax(pred.logits)?;
    let picked = tape.pick(log_probs, &targets)?;
    let w = tape.constant(Tensor::from_parts(vec![n_q], weights));
    let weighted = tape.mul(picked, w)?;
    let ce = tape.sum(weighted)?;
    let mut total = tape.scale(ce, -cfg.cls / weight_sum)?;

    if !gt.is_empty() {
        let n = gt.len() as f64;
        let pb = tape.index_rows(pred.boxes, &matched.assignment)?;
        let gt_boxes: Vec<f64> = gt.objects.iter().flat_map(|o| o.bbox.as_array()).collect();
        let gb = tape.constant(Tensor::from_parts(vec![gt.len(), 4], gt_boxes));
        let diff = tape.sub(pb, gb)?;
        let abs = tape.abs(diff)?;
        let l1 = tape.sum(abs)?;
        let l1 = tape.scale(l1, cfg.l1 / n)?;
        let g = giou_rows(tape, pb, gb)?;
        let g = tape.one_minus(g)?;
        let g = tape.sum(g)?;
        let g = tape.scale(g, cfg.giou / n)?;
        total = tape.add(total, l1)?;
        total = tape.add(total, g)?;
    }
    Ok(total)
}

/// Main loss on the fused prediction plus `aux_coeff` times the loss of
/// every raw decoder layer.
pub fn detection_loss(
    tape: &mut Tape,
    layers: &[PredictionVars],
    fused: PredictionVars,
    gt: &GroundTruth,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let mut total = set_loss(tape, fused, gt, cfg)?;
    if cfg.aux_coeff > 0.0 {
        for &p in layers {
            let l = set_loss(tape, p, gt, cfg)?;
            let l = tape.scale(l, cfg.aux_coeff)?;
            total = tape.add(total, l)?;
        }
    }
    Ok(total)
}
