//! Average precision at an IoU threshold, model evaluation and the
//! per-decoder-layer probe.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoxCxcywh};
use crate::deprompt::{resolve_weight, Phase, PromptWeight};
use crate::loss::{DetectionSet, GroundTruth, Provenance};
use crate::model::{Detector, ModelError};
use crate::nn::ParamStore;
use crate::train::Example;

/// One scored box. Each query contributes at most one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub query: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BoxCxcywh,
}

/// One scored detection per query and foreground class, so a class whose
/// probability is never the largest still contributes to its own ranking.
pub fn detections_from_set(set: &DetectionSet, image: usize) -> Vec<Detection> {
    let probs = set.probabilities();
    let bg = set.background();
    (0..set.len())
        .flat_map(|q| {
            let row = &probs.row(q)[..bg];
            let bbox = set.box_at(q);
            row.iter().enumerate().map(move |(c, &score)| Detection { image, query: q, class_id: c, score, bbox })
        })
        .collect()
}

fn by_score(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.image.cmp(&b.image))
        .then(a.query.cmp(&b.query))
}

/// All-point interpolated AP of one class. `gts` holds `(image, box)`;
/// `None` when the class has no ground truth. Detections are taken in
/// descending score order and each claims the unclaimed ground truth in its
/// image with the highest IoU, if that IoU reaches `threshold`.
pub fn average_precision(dets: &[Detection], gts: &[(usize, BoxCxcywh)], threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| by_score(a, b));
    let mut claimed = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (k, d) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, (img, b)) in gts.iter().enumerate() {
            if *img != d.image || claimed[g] {
                continue;
            }
            let o = iou(&d.bbox, b);
            if o >= threshold && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope from the right, then sum over recall steps.
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = points.last().map_or(0.0, |p| p.0);
    for &(recall, precision) in points.iter().rev() {
        if recall < prev_recall {
            ap += (prev_recall - recall) * envelope;
            prev_recall = recall;
        }
        envelope = envelope.max(precision);
    }
    ap += prev_recall * envelope;
    Some(ap)
}

/// Per-class AP over a set of images.
pub fn class_aps(per_image: &[Vec<Detection>], gts: &[GroundTruth], n_classes: usize, threshold: f64) -> Vec<Option<f64>> {
    (0..n_classes)
        .map(|c| {
            let dets: Vec<Detection> = per_image.iter().flatten().filter(|d| d.class_id == c).copied().collect();
            let g: Vec<(usize, BoxCxcywh)> = gts
                .iter()
                .enumerate()
                .flat_map(|(i, gt)| gt.objects.iter().filter(|o| o.class_id == c).map(move |o| (i, o.bbox)))
                .collect();
            average_precision(&dets, &g, threshold)
        })
        .collect()
}

/// Mean of the classes in `classes` that have ground truth; 0 if none do.
pub fn mean_ap(aps: &[Option<f64>], classes: &[usize]) -> f64 {
    let vals: Vec<f64> = classes.iter().filter_map(|&c| aps.get(c).copied().flatten()).collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    EmptyTestSet,
    Model(ModelError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyTestSet => f.write_str("test set is empty"),
            EvalError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

/// Fused and per-layer predictions of one image in evaluation mode.
pub fn predict_image(detector: &Detector, params: &ParamStore, image: &crate::tensor::Tensor) -> Result<(DetectionSet, Vec<DetectionSet>), ModelError> {
    let w = eval_weight(detector)?;
    let mut s = params.bind_frozen();
    let out = detector.forward(&mut s, image, w)?;
    let fused = detector.predict(&mut s, out.fused)?;
    let fused = DetectionSet::from_vars(&s.tape, fused, Provenance::Fused);
    let mut layers = Vec::with_capacity(out.decoder_outputs.len());
    for (j, &d) in out.decoder_outputs.iter().enumerate() {
        let p = detector.predict(&mut s, d)?;
        layers.push(DetectionSet::from_vars(&s.tape, p, Provenance::Layer(j + 1)));
    }
    Ok((fused, layers))
}

pub fn eval_weight(detector: &Detector) -> Result<PromptWeight, ModelError> {
    Ok(resolve_weight(detector.config().deprompt.strategy(), None, Phase::Eval)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap50: Vec<Option<f64>>,
    pub per_class_ap75: Vec<Option<f64>>,
    pub bap50: f64,
    pub nap50: f64,
    pub nap75: f64,
    /// nAP50 of each raw decoder layer's predictions, fusion bypassed.
    pub layer_nap50: Vec<f64>,
    /// 1-based decoder layer with the best probe score (first on ties).
    pub best_layer: usize,
    pub n_images: usize,
}

/// Evaluates fused predictions and runs the per-layer probe.
pub fn evaluate_ap(
    detector: &Detector,
    params: &ParamStore,
    test: &[Example],
    base: &[usize],
    novel: &[usize],
    threshold: f64,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let n_classes = detector.config().model.n_classes;
    let mut fused = Vec::with_capacity(test.len());
    let mut layers: Vec<Vec<Vec<Detection>>> = Vec::new();
    for (i, ex) in test.iter().enumerate() {
        let (f, ls) = predict_image(detector, params, &ex.image)?;
        fused.push(detections_from_set(&f, i));
        if layers.is_empty() {
            layers = vec![Vec::with_capacity(test.len()); ls.len()];
        }
        for (j, l) in ls.iter().enumerate() {
            layers[j].push(detections_from_set(l, i));
        }
    }
    let gts: Vec<GroundTruth> = test.iter().map(|e| e.gt.clone()).collect();
    let ap50 = class_aps(&fused, &gts, n_classes, threshold);
    let ap75 = class_aps(&fused, &gts, n_classes, 0.75);
    let layer_nap50: Vec<f64> =
        layers.iter().map(|l| mean_ap(&class_aps(l, &gts, n_classes, threshold), novel)).collect();
    let mut best_layer = 1;
    for (j, &v) in layer_nap50.iter().enumerate() {
        if v > layer_nap50[best_layer - 1] {
            best_layer = j + 1;
        }
    }
    Ok(EvalReport {
        bap50: mean_ap(&ap50, base),
        nap50: mean_ap(&ap50, novel),
        nap75: mean_ap(&ap75, novel),
        per_class_ap50: ap50,
        per_class_ap75: ap75,
        layer_nap50,
        best_layer,
        n_images: test.len(),
    })
}
