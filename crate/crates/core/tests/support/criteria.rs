//! Mechanism checks shared by the integration tests and the acceptance
//! runner. Each check returns a one-line summary, `Err` on failure.

#![allow(dead_code)]

use std::collections::BTreeMap;

use dedetr_core::boxes::BoxCxcywh;
use dedetr_core::connectivity::{
    fuse_decoder_outputs, memories_for_decoder, normalized_fusion, normalized_skip, ConnectivityConfig, Fusion,
    SkipMode, FUSION_PARAM, SKIP_PARAM,
};
use dedetr_core::deprompt::{
    deprompt_forward, gradient_routing_check, BatchComposition, DePromptConfig, PromptBranchPair, PromptLayout,
    PromptWeight, PromptWeightStrategy, StrategyKind, WeightVar, NOVEL_PREFIX, BASE_PREFIX, W_LOGIT_PARAM,
};
use dedetr_core::eval::{average_precision, Detection};
use dedetr_core::fewshot::{build_fewshot_sets, EpisodeSpec};
use dedetr_core::gradcheck::{check_tape_gradient, finite_difference_check, GradCheckReport};
use dedetr_core::loss::{pairwise_cost, DetectionSet, LossConfig, Provenance};
use dedetr_core::matching::hungarian_match;
use dedetr_core::model::{Detector, DetectorConfig, ModelConfig, BACKBONE_PREFIX};
use dedetr_core::nn::{MultiHeadAttention, ParamStore, Session};
use dedetr_core::protocol::examples;
use dedetr_core::rng::{mix, rng_for};
use dedetr_core::synth::{generate_dataset, Dataset, WorldConfig};
use dedetr_core::train::{
    batch_loss_and_grads, image_loss, run_training, training_weight, Example, OptimizerConfig, PhaseConfig,
    TrainPhasePlan,
};
use dedetr_core::{Tape, Tensor, TensorError, Var};

use super::oracles;

pub type Outcome = Result<String, String>;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

/// Small deterministic generator so the checks need no RNG crate.
pub struct Gen(u64);

impl Gen {
    pub fn new(seed: u64) -> Self {
        Gen(mix(seed ^ 0x5eed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix(self.0)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.range(lo, hi)).collect()
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), self.vec(n, lo, hi)).unwrap()
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures

/// A tiny detector that still has six encoder and six decoder layers.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_queries: 5,
        ffn_dim: 16,
        patch_size: 8,
        image_size: 16,
        ..ModelConfig::default()
    }
}

pub fn tiny_world() -> WorldConfig {
    WorldConfig { canvas: 16, min_size: 4, max_size: 8, min_objects: 1, max_objects: 3, n_classes: 10 }
}

pub fn detector(model: ModelConfig, deprompt: DePromptConfig, connectivity: ConnectivityConfig) -> Detector {
    Detector::new(DetectorConfig { model, deprompt, connectivity }).expect("valid detector config")
}

/// Train examples of a small world, labelled with the standard split.
pub fn tiny_examples(n: usize, seed: u64) -> Vec<Example> {
    let data = generate_dataset(&tiny_world(), n, 1, seed);
    let spec = EpisodeSpec::standard(1, 0);
    examples(&data, &spec, true, &(0..n).collect::<Vec<_>>())
}

fn all_modes() -> Vec<ConnectivityConfig> {
    let mut out = Vec::new();
    for mode in [SkipMode::Baseline, SkipMode::LearnableSkip, SkipMode::SoftSkip] {
        for fusion in [Fusion::LastLayerOnly, Fusion::Adaptive] {
            out.push(ConnectivityConfig { mode, a_scalar: 0.5, fusion });
        }
    }
    out
}

fn grad_norm_with_prefix(grads: &BTreeMap<String, Tensor>, prefix: &str) -> f64 {
    grads
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .flat_map(|(_, g)| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Equation fidelity

/// Prompt combination, learnable skip, soft skip and adaptive fusion
/// against loop-based recomputation. Returns the worst error per equation.
pub fn equation_errors(instances: usize) -> [f64; 4] {
    let mut worst = [0.0f64; 4];
    for k in 0..instances as u64 {
        let mut g = Gen::new(1000 + k);
        let d = 2 * (1 + g.below(4));
        let heads = if d.is_multiple_of(4) && g.below(2) == 1 { 4 } else { 2 };
        let t = 1 + g.below(6);

        // Prompt combination, fixed and learned w.
        let pair = PromptBranchPair::new(d, heads);
        let mut params = ParamStore::new();
        pair.init(&mut params, &mut rng_for(k, 77, 0), PromptLayout::Decoupled);
        let logit = g.range(-4.0, 4.0);
        params.insert(W_LOGIT_PARAM, Tensor::scalar(logit));
        let x = g.tensor(&[t, d], -2.0, 2.0);
        for learned in [false, true] {
            let mut s = params.bind_all();
            let xv = s.tape.constant(x.clone());
            let (wv, w) = if learned {
                let wv = WeightVar::from_weight(&mut s, PromptWeight::Learned).unwrap();
                (wv, 1.0 / (1.0 + (-logit).exp()))
            } else {
                let w = g.unit();
                (WeightVar::Fixed(w), w)
            };
            let out = deprompt_forward(&mut s, xv, &pair, wv).unwrap();
            let want = oracles::deprompt(&params, x.data(), d, heads, w);
            worst[0] = worst[0].max(max_abs(s.tape.value(out).data(), &want));
        }

        // Memories 0..=6 for the skip equations.
        let mems: Vec<Vec<f64>> = (0..7).map(|_| g.vec(t * d, -3.0, 3.0)).collect();
        let bind = |s: &mut Session| -> Vec<Var> {
            mems.iter().map(|m| s.tape.constant(Tensor::new(vec![t, d], m.clone()).unwrap())).collect()
        };

        let a_logits = g.vec(36, -5.0, 5.0);
        let mut p = ParamStore::new();
        p.insert(SKIP_PARAM, Tensor::new(vec![6, 6], a_logits.clone()).unwrap());
        let mut s = p.bind_all();
        let mv = bind(&mut s);
        let cfg = ConnectivityConfig { mode: SkipMode::LearnableSkip, ..ConnectivityConfig::default() };
        let got = memories_for_decoder(&mut s, &cfg, &mv).unwrap();
        for (gv, want) in got.iter().zip(oracles::learnable_skip(&mems, &a_logits)) {
            worst[1] = worst[1].max(max_abs(s.tape.value(*gv).data(), &want));
        }

        let a = g.unit();
        let mut s = ParamStore::new().bind_all();
        let mv = bind(&mut s);
        let cfg = ConnectivityConfig { mode: SkipMode::SoftSkip, a_scalar: a, fusion: Fusion::LastLayerOnly };
        let got = memories_for_decoder(&mut s, &cfg, &mv).unwrap();
        for (gv, want) in got.iter().zip(oracles::soft_skip(&mems, a)) {
            worst[2] = worst[2].max(max_abs(s.tape.value(*gv).data(), &want));
        }

        let b_logits = g.vec(6, -5.0, 5.0);
        let mut p = ParamStore::new();
        p.insert(FUSION_PARAM, Tensor::vector(b_logits.clone()));
        let mut s = p.bind_all();
        let outs: Vec<Var> = mems[1..].iter().map(|m| s.tape.constant(Tensor::new(vec![t, d], m.clone()).unwrap())).collect();
        let fused = fuse_decoder_outputs(&mut s, Fusion::Adaptive, &outs).unwrap();
        let want = oracles::adaptive_fusion(&mems[1..], &b_logits);
        worst[3] = worst[3].max(max_abs(s.tape.value(fused).data(), &want));
    }
    worst
}

pub fn equation_fidelity(instances: usize) -> Outcome {
    let w = equation_errors(instances);
    let msg = format!(
        "{instances} instances; max abs error prompt {:.1e}, learnable skip {:.1e}, soft skip {:.1e}, fusion {:.1e}",
        w[0], w[1], w[2], w[3]
    );
    if w.iter().all(|&e| e <= 1e-9) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------------
// Reduction equivalences

/// Loss and gradients of one image, with `w` resolved for the batch.
fn loss_and_grads(det: &Detector, params: &ParamStore, ex: &Example) -> (f64, BTreeMap<String, Tensor>) {
    let w = training_weight(det, &[ex]).unwrap();
    let mut s = params.bind_all();
    let l = image_loss(det, &mut s, ex, w, &LossConfig::default()).unwrap();
    let v = s.tape.value(l).item();
    let grads = s.tape.backward(l).unwrap();
    (v, s.param_grads(&grads))
}

/// Largest difference in loss and in shared-parameter gradients.
fn compare(a: &Detector, b: &Detector, params: &ParamStore, ex: &Example) -> (f64, f64) {
    let (la, ga) = loss_and_grads(a, params, ex);
    let (lb, gb) = loss_and_grads(b, params, ex);
    let mut gmax = 0.0f64;
    for (k, x) in &ga {
        if let Some(y) = gb.get(k) {
            gmax = gmax.max(max_abs(x.data(), y.data()));
        }
    }
    ((la - lb).abs(), gmax)
}

/// `(name, loss diff, grad diff)` for each reduction, worst over `seeds`.
pub fn reduction_errors(seeds: u64) -> Vec<(&'static str, f64, f64)> {
    let m = tiny_model();
    let off = DePromptConfig::off();
    let base = ConnectivityConfig::default();
    let mut rows: Vec<(&'static str, f64, f64)> = vec![
        ("soft skip a=1 vs baseline", 0.0, 0.0),
        ("one-hot learnable skip vs baseline", 0.0, 0.0),
        ("saturated fusion vs last layer", 0.0, 0.0),
        ("hard w=1 vs single branch", 0.0, 0.0),
    ];
    let exs = tiny_examples(seeds as usize, 3);
    for seed in 0..seeds {
        let ex = &exs[seed as usize];
        let baseline = detector(m, off, base);

        let soft = detector(m, off, ConnectivityConfig { mode: SkipMode::SoftSkip, a_scalar: 1.0, ..base });
        let p = baseline.init_params(seed);
        let r = compare(&soft, &baseline, &p, ex);
        rows[0].1 = rows[0].1.max(r.0);
        rows[0].2 = rows[0].2.max(r.1);

        let learn = detector(m, off, ConnectivityConfig { mode: SkipMode::LearnableSkip, ..base });
        let mut p = learn.init_params(seed);
        let mut a = Tensor::full(vec![6, 6], -1e3);
        for j in 0..6 {
            a.data_mut()[5 * 6 + j] = 0.0;
        }
        p.insert(SKIP_PARAM, a);
        let r = compare(&learn, &baseline, &p, ex);
        rows[1].1 = rows[1].1.max(r.0);
        rows[1].2 = rows[1].2.max(r.1);

        let adaptive = detector(m, off, ConnectivityConfig { fusion: Fusion::Adaptive, ..base });
        let mut p = adaptive.init_params(seed);
        p.insert(FUSION_PARAM, Tensor::vector(vec![-1e3, -1e3, -1e3, -1e3, -1e3, 0.0]));
        let r = compare(&adaptive, &baseline, &p, ex);
        rows[2].1 = rows[2].1.max(r.0);
        rows[2].2 = rows[2].2.max(r.1);

        let hard = DePromptConfig {
            layout: PromptLayout::Decoupled,
            strategy: StrategyKind::Hard,
            hard_value: 1.0,
            eval_value: 1.0,
            ..DePromptConfig::default()
        };
        let single = DePromptConfig { layout: PromptLayout::Single, ..DePromptConfig::default() };
        let dec = detector(m, hard, base);
        let sing = detector(m, single, base);
        let p = dec.init_params(seed);
        let r = compare(&dec, &sing, &p, ex);
        rows[3].1 = rows[3].1.max(r.0);
        rows[3].2 = rows[3].2.max(r.1);
        // Evaluation routes the eval value, also 1.
        let eval_w = dedetr_core::eval::eval_weight(&dec).unwrap();
        if eval_w != PromptWeight::Fixed(1.0) {
            rows[3].1 = f64::INFINITY;
        }
    }
    rows
}

pub fn reductions(seeds: u64) -> Outcome {
    let rows = reduction_errors(seeds);
    let msg = rows
        .iter()
        .map(|(n, l, g)| format!("{n}: loss {l:.1e} grad {g:.1e}"))
        .collect::<Vec<_>>()
        .join("; ");
    if rows.iter().all(|r| r.1 <= 1e-6 && r.2 <= 1e-6) {
        Ok(format!("{seeds} seeds; {msg}"))
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------------
// Gradient correctness

fn fd_fail(what: &str, seed: u64, r: &GradCheckReport) -> String {
    let i = r.worst_coordinate().unwrap_or(0);
    format!(
        "{what} seed {seed}: coordinate {i} analytic {} numeric {} (max rel {:.2e})",
        r.analytic.get(i).copied().unwrap_or(f64::NAN),
        r.numeric.get(i).copied().unwrap_or(f64::NAN),
        r.max_rel_error
    )
}

/// Dot product with a fixed random tensor makes every output coordinate
/// matter to the scalar under test.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(Gen::new(seed ^ 0xabc).tensor(&shape, -1.0, 1.0));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

/// Tape primitives: softmax, layer norm, matmul and broadcast arithmetic.
pub fn primitive_gradients(seeds: u64) -> Result<usize, String> {
    let mut checks = 0;
    for seed in 0..seeds {
        let mut g = Gen::new(seed);
        let rows = 1 + g.below(4);
        let cols = 2 + g.below(5);
        let x = g.tensor(&[rows, cols], -2.0, 2.0);

        let axis = g.below(2);
        let r = check_tape_gradient(|t, v| { let y = t.softmax(v, axis)?; project(t, y, seed) }, &x, FD_STEP, FD_TOL)
            .map_err(|e| e.to_string())?;
        ensure(r.passed, || fd_fail("softmax", seed, &r))?;

        let r = check_tape_gradient(|t, v| { let y = t.layer_norm(v)?; project(t, y, seed) }, &x, FD_STEP, FD_TOL)
            .map_err(|e| e.to_string())?;
        ensure(r.passed, || fd_fail("layer_norm", seed, &r))?;

        let inner = 1 + g.below(4);
        let other = g.tensor(&[cols, inner], -1.5, 1.5);
        let r = check_tape_gradient(
            |t, v| {
                let o = t.constant(other.clone());
                let y = t.matmul(v, o)?;
                project(t, y, seed)
            },
            &x,
            FD_STEP,
            FD_TOL,
        )
        .map_err(|e| e.to_string())?;
        ensure(r.passed, || fd_fail("matmul (lhs)", seed, &r))?;
        let r = check_tape_gradient(
            |t, v| {
                let o = t.constant(x.clone());
                let y = t.matmul(o, v)?;
                project(t, y, seed)
            },
            &other,
            FD_STEP,
            FD_TOL,
        )
        .map_err(|e| e.to_string())?;
        ensure(r.passed, || fd_fail("matmul (rhs)", seed, &r))?;

        // A row vector broadcast against the matrix, through add, mul and div.
        let b = g.tensor(&[cols], 0.5, 2.0);
        let r = check_tape_gradient(
            |t, v| {
                let m = t.constant(x.clone());
                let s = t.add(m, v)?;
                let p = t.mul(s, v)?;
                let q = t.div(p, v)?;
                let y = t.sub(q, v)?;
                project(t, y, seed)
            },
            &b,
            FD_STEP,
            FD_TOL,
        )
        .map_err(|e| e.to_string())?;
        ensure(r.passed, || fd_fail("broadcast", seed, &r))?;
        checks += 5;
    }
    Ok(checks)
}

/// Central differences against the tape for every coordinate of the named
/// parameters. `build` returns the scalar under test.
pub fn param_gradcheck<F>(params: &ParamStore, names: &[&str], build: F) -> Result<GradCheckReport, String>
where
    F: Fn(&mut Session) -> Result<Var, TensorError>,
{
    let mut s = params.bind_all();
    let root = build(&mut s).map_err(|e| e.to_string())?;
    let grads = s.param_grads(&s.tape.backward(root).map_err(|e| e.to_string())?);
    let mut point = Vec::new();
    let mut analytic = Vec::new();
    for n in names {
        let t = params.get(n).ok_or_else(|| format!("missing parameter {n}"))?;
        point.extend_from_slice(t.data());
        match grads.get(*n) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    finite_difference_check(
        |p| {
            let mut store = params.clone();
            let mut off = 0;
            for n in names {
                let t = store.get_mut(n).expect("present above");
                let len = t.len();
                t.data_mut().copy_from_slice(&p[off..off + len]);
                off += len;
            }
            let mut s = store.bind_frozen();
            let root = build(&mut s)?;
            Ok(s.tape.value(root).item())
        },
        &point,
        &analytic,
        FD_STEP,
        FD_TOL,
    )
    .map_err(|e| e.to_string())
}

/// Attention, prompt combination (with learnable w), skip logits A,
/// fusion logits B and a two-coordinate slice of the full detection loss.
pub fn module_gradients(seeds: u64) -> Result<usize, String> {
    let mut checks = 0;
    for seed in 0..seeds {
        let mut g = Gen::new(500 + seed);
        let d = 4;

        let mha = MultiHeadAttention::new("attn", d, 2);
        let mut p = ParamStore::new();
        mha.init(&mut p, &mut rng_for(seed, 5, 0));
        let xq = g.tensor(&[3, d], -1.0, 1.0);
        let xk = g.tensor(&[4, d], -1.0, 1.0);
        p.insert("input.q", xq);
        p.insert("input.kv", xk);
        let names = ["attn.q.weight", "attn.k.weight", "attn.v.weight", "attn.out.weight", "attn.q.bias", "input.q", "input.kv"];
        let r = param_gradcheck(&p, &names, |s| {
            let q = s.var("input.q")?;
            let kv = s.var("input.kv")?;
            let y = mha.forward(s, q, kv, kv)?;
            project(&mut s.tape, y, seed)
        })?;
        ensure(r.passed, || fd_fail("attention", seed, &r))?;

        let pair = PromptBranchPair::new(d, 2);
        let mut p = ParamStore::new();
        pair.init(&mut p, &mut rng_for(seed, 6, 0), PromptLayout::Decoupled);
        p.insert(W_LOGIT_PARAM, Tensor::scalar(g.range(-2.0, 2.0)));
        p.insert("input.x", g.tensor(&[3, d], -1.0, 1.0));
        let names = [W_LOGIT_PARAM, "deprompt.base.attn.v.weight", "deprompt.novel.attn.q.weight", "deprompt.novel.norm.gamma", "input.x"];
        let r = param_gradcheck(&p, &names, |s| {
            let x = s.var("input.x")?;
            let w = WeightVar::from_weight(s, PromptWeight::Learned)?;
            let y = deprompt_forward(s, x, &pair, w).map_err(|_| TensorError::Invalid("prompt stage"))?;
            project(&mut s.tape, y, seed)
        })?;
        ensure(r.passed, || fd_fail("prompt combination", seed, &r))?;

        let mut p = ParamStore::new();
        p.insert(SKIP_PARAM, g.tensor(&[6, 6], -2.0, 2.0));
        for i in 0..7 {
            p.insert(format!("mem.{i}"), g.tensor(&[2, 3], -1.0, 1.0));
        }
        let cfg = ConnectivityConfig { mode: SkipMode::LearnableSkip, ..ConnectivityConfig::default() };
        let r = param_gradcheck(&p, &[SKIP_PARAM, "mem.3"], |s| {
            let mems = (0..7).map(|i| s.var(&format!("mem.{i}"))).collect::<Result<Vec<_>, _>>()?;
            let out = memories_for_decoder(s, &cfg, &mems).map_err(|_| TensorError::Invalid("skip connection"))?;
            let cat = s.tape.concat_cols(&out)?;
            project(&mut s.tape, cat, seed)
        })?;
        ensure(r.passed, || fd_fail("skip logits", seed, &r))?;

        let mut p = ParamStore::new();
        p.insert(FUSION_PARAM, g.tensor(&[6], -2.0, 2.0));
        for j in 0..6 {
            p.insert(format!("out.{j}"), g.tensor(&[2, 3], -1.0, 1.0));
        }
        let r = param_gradcheck(&p, &[FUSION_PARAM, "out.5"], |s| {
            let outs = (0..6).map(|j| s.var(&format!("out.{j}"))).collect::<Result<Vec<_>, _>>()?;
            let y = fuse_decoder_outputs(s, Fusion::Adaptive, &outs).map_err(|_| TensorError::Invalid("decoder fusion"))?;
            project(&mut s.tape, y, seed)
        })?;
        ensure(r.passed, || fd_fail("fusion logits", seed, &r))?;
        checks += 4;
    }
    Ok(checks)
}

/// Two scalar coordinates of a full detector, differentiated through the
/// whole detection loss (matching held fixed by the small step).
pub fn loss_slice_gradient(seeds: u64) -> Result<usize, String> {
    let exs = tiny_examples(seeds as usize, 11);
    for seed in 0..seeds {
        let cfg = ConnectivityConfig { mode: SkipMode::LearnableSkip, a_scalar: 0.5, fusion: Fusion::Adaptive };
        let det = detector(tiny_model(), DePromptConfig::default(), cfg);
        let mut params = det.init_params(seed);
        params.insert(SKIP_PARAM, Gen::new(seed).tensor(&[6, 6], -1.0, 1.0));
        let ex = &exs[seed as usize];
        let coords: [(&str, usize); 2] = [("encoder.2.ffn.up.weight", (seed as usize * 7) % 64), ("head.class.1.bias", 0)];
        let w = training_weight(&det, &[ex]).unwrap();
        let loss_at = |store: &ParamStore, frozen: bool| -> Result<(f64, BTreeMap<String, Tensor>), TensorError> {
            let mut s = if frozen { store.bind_frozen() } else { store.bind_all() };
            let l = image_loss(&det, &mut s, ex, w, &LossConfig::default()).map_err(|_| TensorError::Invalid("detection loss"))?;
            let v = s.tape.value(l).item();
            if frozen {
                return Ok((v, BTreeMap::new()));
            }
            let g = s.tape.backward(l)?;
            Ok((v, s.param_grads(&g)))
        };
        let (_, grads) = loss_at(&params, false).map_err(|e| e.to_string())?;
        let point: Vec<f64> = coords.iter().map(|(n, i)| params.get(n).unwrap().data()[*i]).collect();
        let analytic: Vec<f64> = coords.iter().map(|(n, i)| grads.get(*n).map_or(0.0, |g| g.data()[*i])).collect();
        let r = finite_difference_check(
            |p| {
                let mut store = params.clone();
                for ((n, i), v) in coords.iter().zip(p) {
                    store.get_mut(n).unwrap().data_mut()[*i] = *v;
                }
                Ok(loss_at(&store, true)?.0)
            },
            &point,
            &analytic,
            FD_STEP,
            FD_TOL,
        )
        .map_err(|e| e.to_string())?;
        ensure(r.passed, || fd_fail("loss slice", seed, &r))?;
    }
    Ok(seeds as usize)
}

pub fn gradients(primitive_seeds: u64, module_seeds: u64, loss_seeds: u64) -> Outcome {
    let a = primitive_gradients(primitive_seeds)?;
    let b = module_gradients(module_seeds)?;
    let c = loss_slice_gradient(loss_seeds)?;
    Ok(format!(
        "{a} primitive checks over {primitive_seeds} seeds, {b} module checks, {c} loss-slice checks (h={FD_STEP}, rel tol {FD_TOL})"
    ))
}

// ---------------------------------------------------------------------------
// Gradient isolation

/// Prompt-stage routing for every strategy, then the full model's batch
/// gradients, then a short training run: one branch must receive exactly
/// zero gradient and stay bitwise unchanged.
pub fn isolation(seeds: u64) -> Outcome {
    let strategies = [
        PromptWeightStrategy::Hard { hard_value: 0.3, eval_value: 0.5 },
        PromptWeightStrategy::Soft { eval_value: 0.5 },
        PromptWeightStrategy::Learnable,
    ];
    let base_only = BatchComposition::new(3, 0).unwrap();
    let novel_only = BatchComposition::new(0, 2).unwrap();
    for seed in 0..seeds {
        let pair = PromptBranchPair::new(8, 2);
        let mut p = ParamStore::new();
        pair.init(&mut p, &mut rng_for(seed, 8, 0), PromptLayout::Decoupled);
        let x = Gen::new(seed).tensor(&[5, 8], -1.0, 1.0);
        for strat in strategies {
            let r = gradient_routing_check(&pair, &p, strat, &base_only, &x).map_err(|e| e.to_string())?;
            ensure(r.novel_grad_norm == 0.0 && r.base_grad_norm > 0.0, || format!("base-only routing {r:?}"))?;
            let r = gradient_routing_check(&pair, &p, strat, &novel_only, &x).map_err(|e| e.to_string())?;
            ensure(r.base_grad_norm == 0.0 && r.novel_grad_norm > 0.0, || format!("novel-only routing {r:?}"))?;
        }
    }

    // Whole detector.
    let data = generate_dataset(&tiny_world(), 120, 1, 5);
    let spec = EpisodeSpec::standard(1, 0);
    let all = examples(&data, &spec, true, &(0..data.train.len()).collect::<Vec<_>>());
    let base: Vec<Example> = all.iter().filter(|e| e.gt.objects.iter().all(|o| !spec.novel_classes.contains(&o.class_id))).cloned().collect();
    let novel: Vec<Example> = all.iter().filter(|e| e.gt.objects.iter().all(|o| spec.novel_classes.contains(&o.class_id))).cloned().collect();
    ensure(base.len() >= 2 && !novel.is_empty(), || "fixture lacks single-split images".into())?;
    let mut full_checks = 0;
    for kind in [StrategyKind::Hard, StrategyKind::Soft, StrategyKind::Learnable] {
        let dp = DePromptConfig { strategy: kind, ..DePromptConfig::default() };
        let det = detector(tiny_model(), dp, ConnectivityConfig::default());
        let params = det.init_params(kind as u64);
        for (batch, silent, live) in [(&base[..2], NOVEL_PREFIX, BASE_PREFIX), (&novel[..1], BASE_PREFIX, NOVEL_PREFIX)] {
            let refs: Vec<&Example> = batch.iter().collect();
            let (_, grads) =
                batch_loss_and_grads(&det, &params, &refs, &LossConfig::default(), &|_| true, 0).map_err(|e| e.to_string())?;
            let silent_norm = grad_norm_with_prefix(&grads, silent);
            let live_norm = grad_norm_with_prefix(&grads, live);
            ensure(silent_norm == 0.0 && live_norm > 0.0, || {
                format!("{kind:?}: {silent} gradient norm {silent_norm}, {live} {live_norm}")
            })?;
            ensure(grads.get(W_LOGIT_PARAM).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)), || {
                format!("{kind:?}: learnable w moved on a single-split batch")
            })?;
            full_checks += 1;
        }

        // Through the optimizer: novel branch bitwise fixed on base-only data.
        let mut trained = params.clone();
        let plan = TrainPhasePlan::base_pretrain(PhaseConfig { epochs: 2, lr: 1e-2, batch_size: 2, patience: 0, min_delta: 0.0 }, 1);
        run_training(&det, &mut trained, &base[..4.min(base.len())], &plan, &OptimizerConfig::default(), &LossConfig::default())
            .map_err(|e| e.to_string())?;
        for (name, t) in params.iter() {
            let after = trained.get(name).unwrap();
            let same = t.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if name.starts_with(NOVEL_PREFIX) || name == W_LOGIT_PARAM {
                ensure(same, || format!("{kind:?}: {name} changed during base-only training"))?;
            }
        }
        ensure(
            params.iter().any(|(n, t)| n.starts_with(BASE_PREFIX) && t != trained.get(n).unwrap()),
            || format!("{kind:?}: base branch did not train"),
        )?;
    }
    Ok(format!(
        "{seeds} prompt-stage seeds x 3 strategies x 2 compositions, {full_checks} full-model batches, base-only training leaves novel branch bitwise fixed"
    ))
}

// ---------------------------------------------------------------------------
// Matcher

pub fn random_detection_set(g: &mut Gen, nq: usize, classes: usize) -> DetectionSet {
    let logits = g.tensor(&[nq, classes + 1], -3.0, 3.0);
    let mut boxes = Vec::new();
    for _ in 0..nq {
        boxes.extend([g.range(0.2, 0.8), g.range(0.2, 0.8), g.range(0.05, 0.4), g.range(0.05, 0.4)]);
    }
    DetectionSet { logits, boxes: Tensor::new(vec![nq, 4], boxes).unwrap(), provenance: Provenance::Fused }
}

pub fn random_gt(g: &mut Gen, n: usize, classes: usize) -> dedetr_core::loss::GroundTruth {
    use dedetr_core::loss::{ClassSplit, GtObject, GroundTruth};
    GroundTruth::new(
        (0..n)
            .map(|_| GtObject {
                class_id: g.below(classes),
                bbox: BoxCxcywh::new(g.range(0.2, 0.8), g.range(0.2, 0.8), g.range(0.05, 0.4), g.range(0.05, 0.4)),
                split: ClassSplit::Base,
            })
            .collect(),
    )
}

/// Hungarian totals against exhaustive enumeration on random matrices and
/// on real matching costs (odd seeds), including heavy ties.
pub fn matcher(seeds: u64) -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut g = Gen::new(9000 + seed);
        let n_gt = 1 + g.below(5);
        let nq = n_gt + g.below(8 - n_gt);
        let cost: Vec<Vec<f64>> = if seed % 2 == 1 {
            let pred = random_detection_set(&mut g, nq, 4);
            let gt = random_gt(&mut g, n_gt, 4);
            pairwise_cost(&pred, &gt, &LossConfig::default()).map_err(|e| e.to_string())?
        } else if seed % 4 == 2 {
            // Small integer costs produce many optimal assignments.
            (0..n_gt).map(|_| (0..nq).map(|_| g.below(3) as f64).collect()).collect()
        } else {
            (0..n_gt).map(|_| g.vec(nq, -5.0, 5.0)).collect()
        };
        let m = hungarian_match(&cost).map_err(|e| e.to_string())?;
        let mut seen = vec![false; nq];
        for &q in &m.assignment {
            ensure(q < nq && !seen[q], || format!("seed {seed}: assignment {:?} is not injective", m.assignment))?;
            seen[q] = true;
        }
        let recomputed: f64 = m.assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        let best = oracles::brute_force_assignment(&cost);
        let err = (m.total_cost - best).abs().max((recomputed - m.total_cost).abs());
        worst = worst.max(err);
        ensure(err <= 1e-12, || format!("seed {seed} ({n_gt}x{nq}): hungarian {} brute force {best}", m.total_cost))?;
    }
    Ok(format!("{seeds} cost matrices (n_gt <= 5, queries <= 7), max |hungarian - exhaustive| {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Normalization

pub fn normalization(instances: usize) -> Outcome {
    let mut worst = 0.0f64;
    for k in 0..instances as u64 {
        let mut g = Gen::new(4242 + k);
        let scale = [0.1, 1.0, 10.0, 200.0][g.below(4)];
        let a = normalized_skip(&g.tensor(&[6, 6], -scale, scale));
        for j in 0..6 {
            let s: f64 = (0..6).map(|i| a.data()[i * 6 + j]).sum();
            worst = worst.max((s - 1.0).abs());
        }
        let b = normalized_fusion(&g.tensor(&[6], -scale, scale));
        worst = worst.max((b.data().iter().sum::<f64>() - 1.0).abs());

        // Mixing identical memories returns them unchanged exactly when the
        // combination weights sum to one.
        let c = g.range(-5.0, 5.0);
        let cfg = ConnectivityConfig { mode: SkipMode::SoftSkip, a_scalar: g.unit(), fusion: Fusion::LastLayerOnly };
        let mut s = ParamStore::new().bind_all();
        let mems: Vec<Var> = (0..7).map(|_| s.tape.constant(Tensor::full(vec![2, 2], c))).collect();
        for m in memories_for_decoder(&mut s, &cfg, &mems).map_err(|e| e.to_string())? {
            for v in s.tape.value(m).data() {
                worst = worst.max((v - c).abs() / c.abs().max(1.0));
            }
        }
        worst = worst.max((cfg.a_scalar + (1.0 - cfg.a_scalar) - 1.0).abs());
    }
    let msg = format!("{instances} instances; max |sum - 1| {worst:.1e}");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------------
// Protocol

pub fn protocol_world() -> WorldConfig {
    WorldConfig { canvas: 32, min_size: 6, max_size: 12, min_objects: 1, max_objects: 3, n_classes: 10 }
}

/// Fine-tune instance counts equal the quotas for several shot settings
/// and seeds; pre-training images hold base classes only.
pub fn fewshot_counts(dataset: &Dataset, seeds: u64) -> Result<usize, String> {
    let mut episodes = 0;
    for n_shot in [1, 2, 3, 5] {
        for balanced in [false, true] {
            for seed in 0..seeds {
                let mut spec = EpisodeSpec::standard(n_shot, seed);
                spec.base_multiplier = 3;
                spec.balanced = balanced;
                let sets = build_fewshot_sets(dataset, &spec).map_err(|e| e.to_string())?;
                let counts = sets.finetune_counts(dataset, 10);
                for (c, &n) in counts.iter().enumerate() {
                    ensure(n == spec.quota(c), || format!("{n_shot}-shot seed {seed}: class {c} has {n}, quota {}", spec.quota(c)))?;
                }
                for &i in &sets.pretrain {
                    ensure(
                        dataset.train[i].annotations.iter().all(|a| spec.base_classes.contains(&a.class_id)),
                        || format!("pretrain image {i} holds a novel object"),
                    )?;
                }
                ensure(sets.test.len() == dataset.test.len(), || "test set is not the full split".into())?;
                episodes += 1;
            }
        }
    }
    Ok(episodes)
}

/// Fine-tuning leaves every backbone parameter bitwise unchanged while the
/// rest of the model moves.
pub fn freeze_contract(dataset: &Dataset) -> Result<usize, String> {
    let mut frozen = 0;
    for conn in all_modes() {
        let m = ModelConfig { d_model: 8, n_heads: 2, n_queries: 4, ffn_dim: 16, patch_size: 8, image_size: 32, ..ModelConfig::default() };
        let det = detector(m, DePromptConfig::default(), conn);
        let before = det.init_params(3);
        let mut params = before.clone();
        let spec = EpisodeSpec::standard(1, 0);
        let data = examples(dataset, &spec, true, &[0, 1, 2, 3]);
        let plan = TrainPhasePlan::fine_tune(PhaseConfig { epochs: 2, lr: 1e-2, batch_size: 2, patience: 0, min_delta: 0.0 }, 2);
        run_training(&det, &mut params, &data, &plan, &OptimizerConfig::default(), &LossConfig::default())
            .map_err(|e| e.to_string())?;
        let mut moved = 0;
        for (name, t) in before.iter() {
            let after = params.get(name).unwrap();
            let same = t.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if name.starts_with(BACKBONE_PREFIX) {
                ensure(same, || format!("{conn:?}: frozen {name} changed"))?;
                frozen += 1;
            } else if !same {
                moved += 1;
            }
        }
        ensure(moved > 0, || format!("{conn:?}: nothing trained"))?;
    }
    Ok(frozen)
}

fn to_xyxy(b: &BoxCxcywh) -> [f64; 4] {
    b.xyxy()
}

/// Random scenes with clustered boxes (so IoU hovers around the threshold)
/// and repeated scores, AP against the brute-force evaluator.
pub fn ap_scenes(scenes: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..scenes {
        let mut g = Gen::new(777 + seed);
        let images = 1 + g.below(4);
        let mut gts: Vec<(usize, BoxCxcywh)> = Vec::new();
        for img in 0..images {
            for _ in 0..g.below(4) {
                gts.push((img, BoxCxcywh::new(g.range(0.3, 0.7), g.range(0.3, 0.7), g.range(0.1, 0.3), g.range(0.1, 0.3))));
            }
        }
        let mut dets = Vec::new();
        for img in 0..images {
            for q in 0..g.below(7) {
                let bbox = match gts.iter().filter(|(i, _)| *i == img).nth(g.below(3)) {
                    Some((_, b)) if g.unit() < 0.7 => {
                        BoxCxcywh::new(b.cx + g.range(-0.05, 0.05), b.cy + g.range(-0.05, 0.05), b.w * g.range(0.8, 1.2), b.h * g.range(0.8, 1.2))
                    }
                    _ => BoxCxcywh::new(g.range(0.2, 0.8), g.range(0.2, 0.8), g.range(0.05, 0.3), g.range(0.05, 0.3)),
                };
                let score = (g.below(5) as f64 + 1.0) / 6.0;
                dets.push(Detection { image: img, query: q, class_id: 0, score, bbox });
            }
        }
        for thr in [0.5, 0.75] {
            let got = average_precision(&dets, &gts, thr);
            let rd: Vec<oracles::RefDet> = dets.iter().map(|d| (d.image, d.query, d.score, to_xyxy(&d.bbox))).collect();
            let rg: Vec<oracles::RefGt> = gts.iter().map(|(i, b)| (*i, to_xyxy(b))).collect();
            let want = oracles::brute_force_ap(&rd, &rg, thr);
            match (got, want) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    ensure((a - b).abs() <= 1e-12, || format!("scene {seed} thr {thr}: evaluator {a} brute force {b}"))?;
                }
                _ => return Err(format!("scene {seed}: evaluator {got:?} brute force {want:?}")),
            }
        }
    }
    Ok(worst)
}

pub fn protocol(dataset: &Dataset, episode_seeds: u64, scenes: u64) -> Outcome {
    let episodes = fewshot_counts(dataset, episode_seeds)?;
    let frozen = freeze_contract(dataset)?;
    let worst = ap_scenes(scenes)?;
    Ok(format!(
        "{episodes} episodes match their quotas; {frozen} frozen tensors bitwise unchanged over 6 connectivity modes; {scenes} AP scenes, max diff {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// Overfit

pub fn overfit_model() -> ModelConfig {
    ModelConfig { d_model: 32, n_heads: 4, n_queries: 8, ffn_dim: 64, patch_size: 8, image_size: 32, ..ModelConfig::default() }
}

/// `(mode, initial loss, final loss)` after `steps` Adam steps on one fixed
/// batch for every connectivity mode.
pub fn overfit_runs(dataset: &Dataset, steps: usize) -> Result<Vec<(String, f64, f64)>, String> {
    let spec = EpisodeSpec::standard(1, 0);
    let batch = examples(dataset, &spec, true, &[0, 1]);
    let mut out = Vec::new();
    for conn in all_modes() {
        let det = detector(overfit_model(), DePromptConfig::default(), conn);
        let mut params = det.init_params(1);
        let refs: Vec<&Example> = batch.iter().collect();
        let loss = LossConfig::default();
        let (initial, _) = batch_loss_and_grads(&det, &params, &refs, &loss, &|_| true, 0).map_err(|e| e.to_string())?;
        let plan = TrainPhasePlan::base_pretrain(
            PhaseConfig { epochs: steps, lr: 1e-3, batch_size: batch.len(), patience: 0, min_delta: 0.0 },
            1,
        );
        run_training(&det, &mut params, &batch, &plan, &OptimizerConfig::default(), &loss).map_err(|e| e.to_string())?;
        let (last, _) = batch_loss_and_grads(&det, &params, &refs, &loss, &|_| true, 0).map_err(|e| e.to_string())?;
        out.push((format!("{:?}/{:?}", conn.mode, conn.fusion), initial, last));
    }
    Ok(out)
}

pub fn overfit(dataset: &Dataset, steps: usize) -> Outcome {
    let runs = overfit_runs(dataset, steps)?;
    let msg = runs.iter().map(|(m, a, b)| format!("{m} {a:.2}->{b:.2} ({:.1}%)", 100.0 * b / a)).collect::<Vec<_>>().join(", ");
    if runs.iter().all(|(_, a, b)| *b < 0.1 * a) {
        Ok(format!("{steps} steps: {msg}"))
    } else {
        Err(msg)
    }
}
