//! Base/novel decoupled prompts.
//!
//! Two independent self-attention branches see the same (visual + positional)
//! tokens. Their outputs are mixed as `w * base(x) + (1 - w) * novel(x)` where
//! `w` depends on the batch composition during training and on the weighting
//! strategy:
//!
//! | strategy  | base only | novel only | mixed               | evaluation |
//! |-----------|-----------|------------|---------------------|------------|
//! | hard      | 1         | 0          | `hard_value`        | `eval_value` |
//! | soft      | 1         | 0          | `N_b / (N_b + N_n)` | `eval_value` |
//! | learnable | 1         | 0          | `sigmoid(theta)`    | `sigmoid(theta)` |

use core::fmt;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::nn::{LayerNorm, MultiHeadAttention, ParamStore, Session};
use crate::rng::DetRng;
use crate::tape::Var;
use crate::tensor::{Tensor, TensorError};

pub const W_LOGIT_PARAM: &str = "deprompt.w_logit";
pub const BASE_PREFIX: &str = "deprompt.base";
pub const NOVEL_PREFIX: &str = "deprompt.novel";

#[derive(Debug, Clone, PartialEq)]
pub enum DePromptError {
    EmptyComposition,
    WeightOutOfRange(f64),
    /// Training-phase weights need the batch composition.
    MissingComposition,
    Tensor(TensorError),
}

impl fmt::Display for DePromptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DePromptError::EmptyComposition => f.write_str("batch has neither base nor novel instances"),
            DePromptError::WeightOutOfRange(w) => write!(f, "prompt weight {w} outside [0, 1]"),
            DePromptError::MissingComposition => f.write_str("training-phase weight needs a batch composition"),
            DePromptError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for DePromptError {}

impl From<TensorError> for DePromptError {
    fn from(e: TensorError) -> Self {
        DePromptError::Tensor(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompositionCase {
    BaseOnly,
    NovelOnly,
    Mixed,
}

/// Base and novel instance counts of one training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchComposition {
    base: usize,
    novel: usize,
}

impl BatchComposition {
    pub fn new(base: usize, novel: usize) -> Result<Self, DePromptError> {
        if base + novel == 0 {
            return Err(DePromptError::EmptyComposition);
        }
        Ok(BatchComposition { base, novel })
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn novel(&self) -> usize {
        self.novel
    }

    pub fn case(&self) -> CompositionCase {
        match (self.base > 0, self.novel > 0) {
            (true, false) => CompositionCase::BaseOnly,
            (false, true) => CompositionCase::NovelOnly,
            _ => CompositionCase::Mixed,
        }
    }

    /// `N_b / (N_b + N_n)`
    pub fn base_fraction(&self) -> f64 {
        self.base as f64 / (self.base + self.novel) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Hard,
    Soft,
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PromptWeightStrategy {
    Hard { hard_value: f64, eval_value: f64 },
    Soft { eval_value: f64 },
    /// `w = sigmoid(theta)`, `theta` stored as [`W_LOGIT_PARAM`].
    Learnable,
}

/// Whether the detector carries a prompt stage and how many branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptLayout {
    /// No prompt stage: tokens go straight into the encoder.
    Off,
    /// Only the base branch, applied unconditionally.
    Single,
    /// Base and novel branches mixed by `w`.
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DePromptConfig {
    pub layout: PromptLayout,
    pub strategy: StrategyKind,
    pub hard_value: f64,
    pub eval_value: f64,
    /// Start fine-tuning with the novel branch copied from the pretrained
    /// base branch. Pre-training never routes gradient to the novel branch,
    /// so otherwise it enters fine-tuning at its random init.
    pub novel_from_base: bool,
}

impl Default for DePromptConfig {
    fn default() -> Self {
        DePromptConfig { layout: PromptLayout::Decoupled, strategy: StrategyKind::Soft, hard_value: 0.5, eval_value: 0.5, novel_from_base: true }
    }
}

impl DePromptConfig {
    pub fn off() -> Self {
        DePromptConfig { layout: PromptLayout::Off, ..Self::default() }
    }

    pub fn strategy(&self) -> PromptWeightStrategy {
        match self.strategy {
            StrategyKind::Hard => PromptWeightStrategy::Hard { hard_value: self.hard_value, eval_value: self.eval_value },
            StrategyKind::Soft => PromptWeightStrategy::Soft { eval_value: self.eval_value },
            StrategyKind::Learnable => PromptWeightStrategy::Learnable,
        }
    }

    pub fn validate(&self) -> Result<(), DePromptError> {
        for v in [self.hard_value, self.eval_value] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DePromptError::WeightOutOfRange(v));
            }
        }
        Ok(())
    }
}

/// The weight to apply, before the learnable logit is looked up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PromptWeight {
    Fixed(f64),
    Learned,
}

/// Resolves `w` symbolically; `Learned` defers to the learnable parameter.
pub fn resolve_weight(
    strategy: PromptWeightStrategy,
    comp: Option<&BatchComposition>,
    phase: Phase,
) -> Result<PromptWeight, DePromptError> {
    match phase {
        Phase::Train => {
            let comp = comp.ok_or(DePromptError::MissingComposition)?;
            Ok(match comp.case() {
                CompositionCase::BaseOnly => PromptWeight::Fixed(1.0),
                CompositionCase::NovelOnly => PromptWeight::Fixed(0.0),
                CompositionCase::Mixed => match strategy {
                    PromptWeightStrategy::Hard { hard_value, .. } => PromptWeight::Fixed(hard_value),
                    PromptWeightStrategy::Soft { .. } => PromptWeight::Fixed(comp.base_fraction()),
                    PromptWeightStrategy::Learnable => PromptWeight::Learned,
                },
            })
        }
        Phase::Eval => Ok(match strategy {
            PromptWeightStrategy::Hard { eval_value, .. } | PromptWeightStrategy::Soft { eval_value } => {
                PromptWeight::Fixed(eval_value)
            }
            PromptWeightStrategy::Learnable => PromptWeight::Learned,
        }),
    }
}

/// Numeric `w` given the current learnable logit.
pub fn resolve_w(
    strategy: PromptWeightStrategy,
    comp: Option<&BatchComposition>,
    phase: Phase,
    learnable_logit: f64,
) -> Result<f64, DePromptError> {
    let w = match resolve_weight(strategy, comp, phase)? {
        PromptWeight::Fixed(w) => w,
        PromptWeight::Learned => math::sigmoid(learnable_logit),
    };
    if !(0.0..=1.0).contains(&w) {
        return Err(DePromptError::WeightOutOfRange(w));
    }
    Ok(w)
}

/// One prompt branch: self-attention with residual and layer norm.
#[derive(Debug, Clone)]
pub struct PromptBranch {
    attn: MultiHeadAttention,
    norm: LayerNorm,
    prefix: &'static str,
}

impl PromptBranch {
    fn new(prefix: &'static str, d_model: usize, heads: usize) -> Self {
        PromptBranch {
            attn: MultiHeadAttention::new(&alloc::format!("{prefix}.attn"), d_model, heads),
            norm: LayerNorm::new(&alloc::format!("{prefix}.norm"), d_model),
            prefix,
        }
    }

    pub fn prefix(&self) -> &'static str {
        self.prefix
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut DetRng) {
        self.attn.init(store, rng);
        self.norm.init(store);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let a = self.attn.forward(s, x, x, x)?;
        let a = s.dropout(a)?;
        let r = s.tape.add(x, a)?;
        self.norm.forward(s, r)
    }

    /// Copies this branch's parameters onto `other`'s names.
    pub fn copy_params_to(&self, other: &PromptBranch, store: &mut ParamStore) {
        let pairs: alloc::vec::Vec<(alloc::string::String, Tensor)> = store
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(self.prefix).map(|rest| (alloc::format!("{}{}", other.prefix, rest), v.clone()))
            })
            .collect();
        for (k, v) in pairs {
            store.insert(k, v);
        }
    }
}

/// Independent base and novel branches; no parameters are shared.
#[derive(Debug, Clone)]
pub struct PromptBranchPair {
    pub base: PromptBranch,
    pub novel: PromptBranch,
}

impl PromptBranchPair {
    pub fn new(d_model: usize, heads: usize) -> Self {
        PromptBranchPair {
            base: PromptBranch::new(BASE_PREFIX, d_model, heads),
            novel: PromptBranch::new(NOVEL_PREFIX, d_model, heads),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut DetRng, layout: PromptLayout) {
        match layout {
            PromptLayout::Off => {}
            PromptLayout::Single => self.base.init(store, rng),
            PromptLayout::Decoupled => {
                self.base.init(store, rng);
                self.novel.init(store, rng);
                store.insert(W_LOGIT_PARAM, Tensor::scalar(0.0));
            }
        }
    }
}

/// `w` on the tape: a constant, or a tracked scalar from the learnable logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightVar {
    Fixed(f64),
    Tracked(Var),
}

impl WeightVar {
    pub fn from_weight(s: &mut Session, w: PromptWeight) -> Result<Self, TensorError> {
        match w {
            PromptWeight::Fixed(v) => Ok(WeightVar::Fixed(v)),
            PromptWeight::Learned => {
                let logit = s.var(W_LOGIT_PARAM)?;
                Ok(WeightVar::Tracked(s.tape.sigmoid(logit)?))
            }
        }
    }

    pub fn value(&self, s: &Session) -> f64 {
        match self {
            WeightVar::Fixed(v) => *v,
            WeightVar::Tracked(v) => s.tape.value(*v).item(),
        }
    }
}

/// `w * base(x) + (1 - w) * novel(x)`. Both branches are always evaluated.
pub fn deprompt_forward(s: &mut Session, x: Var, pair: &PromptBranchPair, w: WeightVar) -> Result<Var, DePromptError> {
    let wv = w.value(s);
    if !(0.0..=1.0).contains(&wv) {
        return Err(DePromptError::WeightOutOfRange(wv));
    }
    let b = pair.base.forward(s, x)?;
    let n = pair.novel.forward(s, x)?;
    let out = match w {
        WeightVar::Fixed(w) => {
            let wb = s.tape.scale(b, w)?;
            let wn = s.tape.scale(n, 1.0 - w)?;
            s.tape.add(wb, wn)?
        }
        WeightVar::Tracked(w) => {
            let wb = s.tape.mul(b, w)?;
            let one_minus = s.tape.one_minus(w)?;
            let wn = s.tape.mul(n, one_minus)?;
            s.tape.add(wb, wn)?
        }
    };
    Ok(out)
}

/// Gradient norms of each branch under a given routing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingReport {
    pub w: f64,
    pub base_grad_norm: f64,
    pub novel_grad_norm: f64,
}

/// Runs a squared-output loss through the prompt stage with `w` resolved for
/// `comp` and reports each branch's parameter gradient norm.
pub fn gradient_routing_check(
    pair: &PromptBranchPair,
    params: &ParamStore,
    strategy: PromptWeightStrategy,
    comp: &BatchComposition,
    x: &Tensor,
) -> Result<RoutingReport, DePromptError> {
    let mut s = params.bind_all();
    let xv = s.tape.constant(x.clone());
    let w = resolve_weight(strategy, Some(comp), Phase::Train)?;
    let w = WeightVar::from_weight(&mut s, w)?;
    let out = deprompt_forward(&mut s, xv, pair, w)?;
    let sq = s.tape.mul(out, out)?;
    let loss = s.tape.sum(sq)?;
    let grads = s.tape.backward(loss)?;
    let mut base = 0.0;
    let mut novel = 0.0;
    for (name, g) in s.param_grads(&grads) {
        let sq: f64 = g.data().iter().map(|v| v * v).sum();
        if name.starts_with(pair.base.prefix()) {
            base += sq;
        } else if name.starts_with(pair.novel.prefix()) {
            novel += sq;
        }
    }
    Ok(RoutingReport { w: w.value(&s), base_grad_norm: math::sqrt(base), novel_grad_norm: math::sqrt(novel) })
}
