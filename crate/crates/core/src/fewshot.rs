//! Base/novel class partition and exact n-shot fine-tune set construction.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::loss::{ClassSplit, GroundTruth, GtObject};
use crate::model::ConfigError;
use crate::rng::{rng_for, stream};
use crate::synth::{Dataset, Sample, DEFAULT_NOVEL};

pub const MAX_BASE_MULTIPLIER: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub n_shot: usize,
    /// Base instances per class in the fine-tune set, as a multiple of
    /// `n_shot`, when not balanced.
    pub base_multiplier: usize,
    pub balanced: bool,
    pub seed: u64,
}

impl EpisodeSpec {
    /// Every class of a `n_classes` catalog that is not novel is base.
    pub fn with_novel(n_classes: usize, novel: &[usize], n_shot: usize, seed: u64) -> Self {
        EpisodeSpec {
            base_classes: (0..n_classes).filter(|c| !novel.contains(c)).collect(),
            novel_classes: novel.to_vec(),
            n_shot,
            base_multiplier: MAX_BASE_MULTIPLIER,
            balanced: false,
            seed,
        }
    }

    pub fn standard(n_shot: usize, seed: u64) -> Self {
        Self::with_novel(10, &DEFAULT_NOVEL, n_shot, seed)
    }

    pub fn validate(&self, n_classes: usize) -> Result<(), ConfigError> {
        let base: BTreeSet<_> = self.base_classes.iter().collect();
        let novel: BTreeSet<_> = self.novel_classes.iter().collect();
        if base.len() != self.base_classes.len() || novel.len() != self.novel_classes.len() {
            return Err(ConfigError::new("episode.classes", "duplicate class ids"));
        }
        if base.intersection(&novel).next().is_some() {
            return Err(ConfigError::new("episode.novel_classes", "base and novel classes overlap"));
        }
        if self.base_classes.is_empty() || self.novel_classes.is_empty() {
            return Err(ConfigError::new("episode.novel_classes", "need at least one base and one novel class"));
        }
        if let Some(&c) = base.union(&novel).find(|&&&c| c >= n_classes) {
            return Err(ConfigError::new("episode.classes", format!("class {c} outside catalog of {n_classes}")));
        }
        if self.n_shot == 0 {
            return Err(ConfigError::new("episode.n_shot", "must be positive"));
        }
        if self.base_multiplier == 0 || self.base_multiplier > MAX_BASE_MULTIPLIER {
            return Err(ConfigError::new("episode.base_multiplier", "must be between 1 and 10"));
        }
        Ok(())
    }

    pub fn split_of(&self, class_id: usize) -> ClassSplit {
        if self.novel_classes.contains(&class_id) {
            ClassSplit::Novel
        } else {
            ClassSplit::Base
        }
    }

    pub fn base_quota(&self) -> usize {
        if self.balanced {
            self.n_shot
        } else {
            self.base_multiplier * self.n_shot
        }
    }

    /// Target instance count per class in the fine-tune set.
    pub fn quota(&self, class_id: usize) -> usize {
        if self.novel_classes.contains(&class_id) {
            self.n_shot
        } else if self.base_classes.contains(&class_id) {
            self.base_quota()
        } else {
            0
        }
    }

    pub fn ground_truth(&self, sample: &Sample) -> GroundTruth {
        GroundTruth::new(
            sample
                .annotations
                .iter()
                .map(|a| GtObject { class_id: a.class_id, bbox: a.bbox, split: self.split_of(a.class_id) })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FewShotError {
    InsufficientInstances { class_id: usize, wanted: usize, found: usize },
    EmptyPretrain,
}

impl fmt::Display for FewShotError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FewShotError::InsufficientInstances { class_id, wanted, found } => {
                write!(f, "class {class_id}: wanted {wanted} fine-tune instances, could only place {found}")
            }
            FewShotError::EmptyPretrain => f.write_str("no training image contains only base classes"),
        }
    }
}

impl core::error::Error for FewShotError {}

/// Indices into the dataset's train and test splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSets {
    pub pretrain: Vec<usize>,
    pub finetune: Vec<usize>,
    pub test: Vec<usize>,
}

impl FewShotSets {
    /// Instance count per class over the fine-tune images.
    pub fn finetune_counts(&self, dataset: &Dataset, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &i in &self.finetune {
            for a in &dataset.train[i].annotations {
                counts[a.class_id] += 1;
            }
        }
        counts
    }
}

/// Pretrain: every train image whose objects are all base classes.
/// Fine-tune: whole train images taken greedily from a seeded shuffle, each
/// accepted only if it keeps every class at or under its quota, until all
/// quotas are met exactly. Test: the full test split.
pub fn build_fewshot_sets(dataset: &Dataset, spec: &EpisodeSpec) -> Result<FewShotSets, FewShotError> {
    let n_classes = dataset.world.n_classes;
    let pretrain: Vec<usize> = dataset
        .train
        .iter()
        .enumerate()
        .filter(|(_, s)| s.annotations.iter().all(|a| spec.base_classes.contains(&a.class_id)))
        .map(|(i, _)| i)
        .collect();
    if pretrain.is_empty() {
        return Err(FewShotError::EmptyPretrain);
    }

    let quota: Vec<usize> = (0..n_classes).map(|c| spec.quota(c)).collect();
    let mut counts = vec![0usize; n_classes];
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    order.shuffle(&mut rng_for(spec.seed, stream::EPISODE, 0));
    let mut finetune = Vec::new();
    for i in order {
        if counts == quota {
            break;
        }
        let mut add = vec![0usize; n_classes];
        for a in &dataset.train[i].annotations {
            add[a.class_id] += 1;
        }
        if (0..n_classes).all(|c| counts[c] + add[c] <= quota[c]) {
            for c in 0..n_classes {
                counts[c] += add[c];
            }
            finetune.push(i);
        }
    }
    if let Some(c) = (0..n_classes).find(|&c| counts[c] != quota[c]) {
        return Err(FewShotError::InsufficientInstances { class_id: c, wanted: quota[c], found: counts[c] });
    }
    finetune.sort_unstable();
    Ok(FewShotSets { pretrain, finetune, test: (0..dataset.test.len()).collect() })
}
