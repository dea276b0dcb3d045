//! The full few-shot experiment: synthetic data, base pre-training,
//! n-shot fine-tuning with a frozen backbone, and evaluation.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::connectivity::ConnectivityConfig;
use crate::deprompt::{DePromptConfig, PromptLayout};
use crate::eval::{evaluate_ap, EvalError, EvalReport};
use crate::fewshot::{build_fewshot_sets, EpisodeSpec, FewShotError, FewShotSets, MAX_BASE_MULTIPLIER};
use crate::loss::LossConfig;
use crate::model::{ConfigError, Detector, DetectorConfig, ModelConfig, ModelError};
use crate::nn::ParamStore;
use crate::rng::{derive_seed, stream};
use crate::synth::{generate_dataset, Dataset, WorldConfig, DEFAULT_NOVEL};
use crate::train::{run_training, Example, OptimizerConfig, PhaseConfig, TrainError, TrainOutcome, TrainPhasePlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Dataset seed, independent of the run seed so that seeds vary the
    /// model and the episode, not the world.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 2000, n_test: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub novel_classes: Vec<usize>,
    pub n_shot: usize,
    pub base_multiplier: usize,
    pub balanced: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { novel_classes: DEFAULT_NOVEL.to_vec(), n_shot: 5, base_multiplier: MAX_BASE_MULTIPLIER, balanced: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub deprompt: DePromptConfig,
    pub connectivity: ConnectivityConfig,
    pub loss: LossConfig,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub episode: EpisodeConfig,
    pub optimizer: OptimizerConfig,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub iou_threshold: f64,
    /// Seed for pre-training. When set, runs that differ only in their run
    /// seed share one base model and the seed varies the few-shot sample and
    /// fine-tuning alone.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            deprompt: DePromptConfig::default(),
            connectivity: ConnectivityConfig::default(),
            loss: LossConfig::default(),
            world: WorldConfig::default(),
            data: DataConfig::default(),
            episode: EpisodeConfig::default(),
            optimizer: OptimizerConfig::default(),
            pretrain: PhaseConfig::default(),
            finetune: PhaseConfig { epochs: 40, lr: 5e-4, batch_size: 4, patience: 5, min_delta: 0.01 },
            iou_threshold: 0.5,
            pretrain_seed: None,
        }
    }
}

impl ExperimentConfig {
    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig { model: self.model, deprompt: self.deprompt, connectivity: self.connectivity }
    }

    pub fn episode_spec(&self, seed: u64) -> EpisodeSpec {
        let mut spec = EpisodeSpec::with_novel(self.world.n_classes, &self.episode.novel_classes, self.episode.n_shot, derive_seed(seed, stream::EPISODE, 0));
        spec.base_multiplier = self.episode.base_multiplier;
        spec.balanced = self.episode.balanced;
        spec
    }

    /// The seed pre-training uses for a run with seed `run_seed`.
    pub fn pretrain_seed_for(&self, run_seed: u64) -> u64 {
        self.pretrain_seed.unwrap_or(run_seed)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.detector_config().validate()?;
        self.loss.validate()?;
        self.world.validate()?;
        self.optimizer.validate()?;
        self.pretrain.validate("pretrain")?;
        self.finetune.validate("finetune")?;
        if self.model.n_classes != self.world.n_classes {
            return Err(ConfigError::new("model.n_classes", "must equal world.n_classes"));
        }
        if self.model.image_size != self.world.canvas {
            return Err(ConfigError::new("model.image_size", "must equal world.canvas"));
        }
        if self.model.channels != 1 {
            return Err(ConfigError::new("model.channels", "synthetic images are single-channel"));
        }
        if self.world.max_objects > self.model.n_queries {
            return Err(ConfigError::new("world.max_objects", "cannot exceed model.n_queries"));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(ConfigError::new("data.n_test", "both splits need at least one image"));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(ConfigError::new("iou_threshold", "must be in (0, 1]"));
        }
        self.episode_spec(0).validate(self.world.n_classes)
    }

    /// The config with every field that cannot influence pre-training reset
    /// to its default; two configs with equal keys share a pretrained model.
    pub fn pretrain_key(&self) -> ExperimentConfig {
        let mut k = self.clone();
        k.episode.n_shot = EpisodeConfig::default().n_shot;
        k.episode.base_multiplier = EpisodeConfig::default().base_multiplier;
        k.episode.balanced = false;
        k.finetune = PhaseConfig::default();
        k.iou_threshold = 0.5;
        // Pre-training batches hold base classes only, so every strategy
        // routes w = 1 there.
        k.deprompt.strategy = DePromptConfig::default().strategy;
        k.deprompt.eval_value = DePromptConfig::default().eval_value;
        k.deprompt.hard_value = DePromptConfig::default().hard_value;
        k.deprompt.novel_from_base = DePromptConfig::default().novel_from_base;
        k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolError {
    Config(ConfigError),
    FewShot(FewShotError),
    Model(ModelError),
    Train { phase: &'static str, error: TrainError },
    Eval(EvalError),
}

impl fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolError::Config(e) => write!(f, "invalid config: {e}"),
            ProtocolError::FewShot(e) => write!(f, "few-shot sampling: {e}"),
            ProtocolError::Model(e) => write!(f, "{e}"),
            ProtocolError::Train { phase, error } => write!(f, "{phase}: {error}"),
            ProtocolError::Eval(e) => write!(f, "evaluation: {e}"),
        }
    }
}

impl core::error::Error for ProtocolError {}

impl From<ConfigError> for ProtocolError {
    fn from(e: ConfigError) -> Self {
        ProtocolError::Config(e)
    }
}

impl From<FewShotError> for ProtocolError {
    fn from(e: FewShotError) -> Self {
        ProtocolError::FewShot(e)
    }
}

impl From<ModelError> for ProtocolError {
    fn from(e: ModelError) -> Self {
        ProtocolError::Model(e)
    }
}

impl From<EvalError> for ProtocolError {
    fn from(e: EvalError) -> Self {
        ProtocolError::Eval(e)
    }
}

/// A pretrained model: parameters after base training plus its loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub params: ParamStore,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub pretrain: TrainOutcome,
    pub finetune: TrainOutcome,
    pub params: ParamStore,
    pub report: EvalReport,
    pub sets: FewShotSets,
}

pub fn examples(dataset: &Dataset, spec: &EpisodeSpec, train: bool, indices: &[usize]) -> Vec<Example> {
    let split = if train { &dataset.train } else { &dataset.test };
    indices.iter().map(|&i| Example { image: split[i].image.to_tensor(), gt: spec.ground_truth(&split[i]) }).collect()
}

/// A prepared experiment: validated config, generated world, sampled sets.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub detector: Detector,
    pub dataset: Dataset,
    pub spec: EpisodeSpec,
    pub sets: FewShotSets,
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Self, ProtocolError> {
        config.validate()?;
        let detector = Detector::new(config.detector_config())?;
        let dataset = generate_dataset(&config.world, config.data.n_train, config.data.n_test, config.data.seed);
        Self::with_dataset(config, seed, detector, dataset)
    }

    /// Like [`Experiment::prepare`] but reusing an already generated world.
    pub fn with_dataset(config: &ExperimentConfig, seed: u64, detector: Detector, dataset: Dataset) -> Result<Self, ProtocolError> {
        let spec = config.episode_spec(seed);
        let sets = build_fewshot_sets(&dataset, &spec)?;
        Ok(Experiment { config: config.clone(), seed, detector, dataset, spec, sets })
    }

    pub fn pretrain(&self) -> Result<Pretrained, ProtocolError> {
        let seed = self.config.pretrain_seed_for(self.seed);
        let mut params = self.detector.init_params(seed);
        let data = examples(&self.dataset, &self.spec, true, &self.sets.pretrain);
        let plan = TrainPhasePlan::base_pretrain(self.config.pretrain, derive_seed(seed, stream::PRETRAIN, 0));
        let outcome = run_training(&self.detector, &mut params, &data, &plan, &self.config.optimizer, &self.config.loss)
            .map_err(|error| ProtocolError::Train { phase: "pretrain", error })?;
        Ok(Pretrained { params, outcome })
    }

    pub fn finetune(&self, pretrained: &Pretrained) -> Result<RunResult, ProtocolError> {
        let mut params = pretrained.params.clone();
        let dp = self.config.deprompt;
        if dp.layout == PromptLayout::Decoupled && dp.novel_from_base {
            let pair = self.detector.prompts();
            pair.base.copy_params_to(&pair.novel, &mut params);
        }
        let data = examples(&self.dataset, &self.spec, true, &self.sets.finetune);
        let plan = TrainPhasePlan::fine_tune(self.config.finetune, derive_seed(self.seed, stream::FINETUNE, 0));
        let outcome = run_training(&self.detector, &mut params, &data, &plan, &self.config.optimizer, &self.config.loss)
            .map_err(|error| ProtocolError::Train { phase: "finetune", error })?;
        let report = self.evaluate(&params)?;
        Ok(RunResult { pretrain: pretrained.outcome.clone(), finetune: outcome, params, report, sets: self.sets.clone() })
    }

    pub fn evaluate(&self, params: &ParamStore) -> Result<EvalReport, ProtocolError> {
        let test = examples(&self.dataset, &self.spec, false, &self.sets.test);
        Ok(evaluate_ap(
            &self.detector,
            params,
            &test,
            &self.spec.base_classes,
            &self.spec.novel_classes,
            self.config.iou_threshold,
        )?)
    }

    pub fn run(&self) -> Result<RunResult, ProtocolError> {
        let pre = self.pretrain()?;
        self.finetune(&pre)
    }
}

/// Pretrain, fine-tune and evaluate in one call.
pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<RunResult, ProtocolError> {
    Experiment::prepare(config, seed)?.run()
}
