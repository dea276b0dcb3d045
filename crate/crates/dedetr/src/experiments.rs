//! Run orchestration: single runs with persisted artifacts, the four-row
//! module ladder, prompt-weight sweeps and the skip comparison.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use dedetr_core::connectivity::{report_connection_weights, Fusion, SkipMode};
use dedetr_core::deprompt::{PromptLayout, StrategyKind};
use dedetr_core::eval::EvalReport;
use dedetr_core::model::Detector;
use dedetr_core::nn::ParamStore;
use dedetr_core::protocol::{Experiment, Pretrained};
use dedetr_core::train::TrainOutcome;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::registry::{Registry, RunStatus};
use crate::report::{
    ap_rows, eval_report_kv, probe_rows, spread, write_csv, AblationRow, LossRow, SkipRow, SweepRow,
};

pub const EVAL_FILE: &str = "eval.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOSS_FILE: &str = "loss_curve.csv";
pub const AP_FILE: &str = "ap.csv";
pub const PROBE_FILE: &str = "probe.csv";
pub const CONNECTIVITY_FILE: &str = "connectivity.txt";

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub id: String,
    pub config: RunConfig,
    pub report: EvalReport,
    pub params: ParamStore,
    pub pretrain: TrainOutcome,
    pub finetune: TrainOutcome,
}

type Slot = Arc<Mutex<Option<Arc<Pretrained>>>>;

/// Executes runs against a registry. Pretrained models are shared between
/// runs whose configs differ only in fine-tune or evaluation settings.
pub struct Runner {
    registry: Registry,
    jobs: usize,
    pretrained: Mutex<HashMap<String, Slot>>,
}

fn io_write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn loss_rows(hash: &str, seed: u64, pre: &TrainOutcome, fine: &TrainOutcome) -> Vec<LossRow> {
    let rows = |phase: &str, o: &TrainOutcome| -> Vec<LossRow> {
        o.loss_curve
            .iter()
            .enumerate()
            .map(|(e, &loss)| LossRow { config_hash: hash.to_string(), seed, phase: phase.to_string(), epoch: e + 1, loss })
            .collect()
    };
    let mut out = rows("pretrain", pre);
    out.extend(rows("finetune", fine));
    out
}

impl Runner {
    pub fn new(registry: Registry, jobs: usize) -> Self {
        Runner { registry, jobs: jobs.max(1), pretrained: Mutex::new(HashMap::new()) }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    fn pretrain(&self, exp: &Experiment, config: &RunConfig) -> Result<Arc<Pretrained>, CliError> {
        let e = config.experiment();
        let key = RunConfig::from_experiment(&e.pretrain_key(), e.pretrain_seed_for(config.seed)).hash();
        let slot = {
            let mut map = self.pretrained.lock().unwrap_or_else(|p| p.into_inner());
            map.entry(key.clone()).or_default().clone()
        };
        let mut guard = slot.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(p) = guard.as_ref() {
            return Ok(p.clone());
        }
        let cache = self.registry.cache_dir();
        let path = cache.join(format!("pretrain-{key}.ckpt"));
        let curve_path = cache.join(format!("pretrain-{key}.json"));
        let cached = match (Checkpoint::load(&path), std::fs::read_to_string(&curve_path)) {
            (Ok(ck), Ok(text)) => serde_json::from_str::<(Vec<f64>, usize, bool)>(&text)
                .ok()
                .map(|(loss_curve, steps, stopped_early)| Pretrained {
                    params: ck.params,
                    outcome: TrainOutcome { loss_curve, steps, stopped_early },
                }),
            _ => None,
        };
        let pre = match cached {
            Some(p) => p,
            None => {
                let p = exp.pretrain()?;
                std::fs::create_dir_all(&cache).map_err(|e| CliError::io(&cache, e))?;
                let ck = Checkpoint { config: config.clone(), seed: config.seed, params: p.params.clone() };
                // Write under a temporary name so a partial file is never read back.
                let tmp = cache.join(format!("pretrain-{key}.ckpt.tmp"));
                ck.save(&tmp)?;
                std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
                let o = &p.outcome;
                let text = serde_json::to_string(&(&o.loss_curve, o.steps, o.stopped_early)).expect("curve serializes");
                io_write(&curve_path, &text)?;
                p
            }
        };
        let pre = Arc::new(pre);
        *guard = Some(pre.clone());
        Ok(pre)
    }

    /// Pretrain (or reuse), fine-tune, evaluate and persist one run.
    pub fn run(&self, config: &RunConfig) -> Result<RunRecord, CliError> {
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let (id, dir) = self.registry.start(config)?;
        match self.execute(config, &dir) {
            Ok((report, params, pretrain, finetune)) => {
                self.registry.finish(&id, config, RunStatus::Completed, None)?;
                Ok(RunRecord { id, config: config.clone(), report, params, pretrain, finetune })
            }
            Err(e) => {
                self.registry.finish(&id, config, RunStatus::Failed, Some(e.to_string()))?;
                Err(e)
            }
        }
    }

    fn execute(&self, config: &RunConfig, dir: &Path) -> Result<(EvalReport, ParamStore, TrainOutcome, TrainOutcome), CliError> {
        io_write(&dir.join(CONFIG_FILE), &config.to_toml())?;
        let exp = Experiment::prepare(&config.experiment(), config.seed)?;
        let pre = self.pretrain(&exp, config)?;
        let result = exp.finetune(&pre)?;
        let hash = config.hash();
        let seed = config.seed;
        Checkpoint { config: config.clone(), seed, params: result.params.clone() }.save(&dir.join(CHECKPOINT_FILE))?;
        io_write(&dir.join(EVAL_FILE), &eval_report_kv(&result.report, &hash, seed))?;
        write_csv(&dir.join(AP_FILE), &ap_rows(&result.report, &exp.spec.novel_classes, &hash, seed))?;
        write_csv(&dir.join(PROBE_FILE), &probe_rows(&result.report, &hash, seed))?;
        write_csv(&dir.join(LOSS_FILE), &loss_rows(&hash, seed, &result.pretrain, &result.finetune))?;
        let mut conn = format!("config_hash: {hash}\nseed: {seed}\n");
        conn.push_str(&report_connection_weights(&config.connectivity, &result.params));
        io_write(&dir.join(CONNECTIVITY_FILE), &conn)?;
        Ok((result.report, result.params, result.pretrain, result.finetune))
    }

    /// Runs every config, up to `jobs` at a time; results keep input order.
    pub fn run_many(&self, configs: &[RunConfig]) -> Vec<Result<RunRecord, CliError>> {
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<Result<RunRecord, CliError>>>> = configs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..self.jobs.min(configs.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= configs.len() {
                        break;
                    }
                    let r = self.run(&configs[i]);
                    *results[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
                });
            }
        });
        results
            .into_iter()
            .map(|m| m.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every config was run"))
            .collect()
    }

    pub fn ablate(&self, base: &RunConfig, seeds: &[u64], shots: &[usize]) -> Result<AblationTable, CliError> {
        require_seeds(seeds)?;
        let ladder = ladder(base);
        let mut configs = Vec::new();
        let mut keys = Vec::new();
        for &n_shot in shots {
            for (r, (label, cfg)) in ladder.iter().enumerate() {
                for &seed in seeds {
                    let mut c = cfg.with_seed(seed);
                    c.episode.n_shot = n_shot;
                    configs.push(c);
                    keys.push((r + 1, *label, n_shot));
                }
            }
        }
        let results = self.run_many(&configs);
        let rows = configs
            .iter()
            .zip(&keys)
            .zip(results)
            .map(|((c, &(row, label, n_shot)), r)| AblationRow {
                config_hash: c.hash(),
                seed: c.seed,
                row,
                label: label.to_string(),
                n_shot,
                status: if r.is_ok() { "ok".into() } else { format!("failed: {}", r.as_ref().err().unwrap()) },
                nap50: r.as_ref().ok().map(|x| x.report.nap50),
                bap50: r.as_ref().ok().map(|x| x.report.bap50),
            })
            .collect();
        Ok(AblationTable::new(rows))
    }

    pub fn sweep_w(&self, config: &RunConfig, values: &[f64]) -> Result<Vec<SweepRow>, CliError> {
        if config.deprompt.layout != PromptLayout::Decoupled {
            return Err(CliError::Usage("sweep-w needs deprompt.layout = \"decoupled\"".into()));
        }
        if values.is_empty() || values.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(CliError::Usage("sweep values must lie in [0, 1]".into()));
        }
        match config.deprompt.strategy {
            StrategyKind::Learnable => Err(CliError::Usage("a learnable w is trained, not swept".into())),
            StrategyKind::Soft => {
                let rec = self.run(config)?;
                let exp = Experiment::prepare(&config.experiment(), config.seed)?;
                values
                    .iter()
                    .map(|&w| {
                        let mut c = config.clone();
                        c.deprompt.eval_value = w;
                        let det = Detector::new(c.experiment().detector_config()).map_err(dedetr_core::protocol::ProtocolError::from)?;
                        let e = Experiment::with_dataset(&c.experiment(), c.seed, det, exp.dataset.clone())?;
                        let report = e.evaluate(&rec.params)?;
                        Ok(SweepRow {
                            config_hash: rec.config.hash(),
                            seed: c.seed,
                            strategy: "soft".into(),
                            w,
                            nap50: report.nap50,
                            bap50: report.bap50,
                        })
                    })
                    .collect()
            }
            StrategyKind::Hard => {
                let configs: Vec<RunConfig> = values
                    .iter()
                    .map(|&w| {
                        let mut c = config.clone();
                        c.deprompt.hard_value = w;
                        c.deprompt.eval_value = w;
                        c
                    })
                    .collect();
                self.run_many(&configs)
                    .into_iter()
                    .zip(values)
                    .map(|(r, &w)| {
                        let r = r?;
                        Ok(SweepRow {
                            config_hash: r.config.hash(),
                            seed: r.config.seed,
                            strategy: "hard".into(),
                            w,
                            nap50: r.report.nap50,
                            bap50: r.report.bap50,
                        })
                    })
                    .collect()
            }
        }
    }

    pub fn compare_skip(&self, config: &RunConfig, seeds: &[u64]) -> Result<Vec<SkipRow>, CliError> {
        require_seeds(seeds)?;
        let mut configs = Vec::new();
        for mode in [SkipMode::SoftSkip, SkipMode::LearnableSkip] {
            for &seed in seeds {
                let mut c = config.with_seed(seed);
                c.connectivity.mode = mode;
                configs.push(c);
            }
        }
        let results = self.run_many(&configs);
        Ok(configs
            .iter()
            .zip(results)
            .map(|(c, r)| {
                let mut skip_only = c.connectivity;
                skip_only.fusion = Fusion::LastLayerOnly;
                SkipRow {
                    config_hash: c.hash(),
                    seed: c.seed,
                    mode: mode_name(c.connectivity.mode).into(),
                    extra_params: skip_only.extra_parameters(),
                    status: match &r {
                        Ok(_) => "ok".into(),
                        Err(e) => format!("failed: {e}"),
                    },
                    nap50: r.as_ref().ok().map(|x| x.report.nap50),
                    bap50: r.as_ref().ok().map(|x| x.report.bap50),
                }
            })
            .collect())
    }

    /// Re-evaluates a stored run with its per-layer probe.
    pub fn probe(&self, id: &str) -> Result<(RunConfig, EvalReport), CliError> {
        self.registry.find(id)?;
        let ck = Checkpoint::load(&self.registry.run_dir(id).join(CHECKPOINT_FILE))?;
        let exp = Experiment::prepare(&ck.config.experiment(), ck.seed)?;
        let report = exp.evaluate(&ck.params)?;
        Ok((ck.config, report))
    }
}

fn require_seeds(seeds: &[u64]) -> Result<(), CliError> {
    if seeds.len() < 3 {
        return Err(CliError::Usage(format!("need at least 3 seeds, got {}", seeds.len())));
    }
    Ok(())
}

pub fn mode_name(mode: SkipMode) -> &'static str {
    match mode {
        SkipMode::Baseline => "baseline",
        SkipMode::LearnableSkip => "learnable_skip",
        SkipMode::SoftSkip => "soft_skip",
    }
}

/// The four cumulative configurations: plain detector, then the prompt
/// stage, then the encoder-decoder skip, then adaptive decoder fusion.
pub fn ladder(base: &RunConfig) -> [(&'static str, RunConfig); 4] {
    let mut plain = base.clone();
    plain.deprompt.layout = PromptLayout::Off;
    plain.connectivity.mode = SkipMode::Baseline;
    plain.connectivity.fusion = Fusion::LastLayerOnly;

    let mut prompt = plain.clone();
    prompt.deprompt.layout = PromptLayout::Decoupled;

    let mut skip = prompt.clone();
    skip.connectivity.mode = match base.connectivity.mode {
        SkipMode::Baseline => SkipMode::SoftSkip,
        m => m,
    };

    let mut adaptive = skip.clone();
    adaptive.connectivity.fusion = Fusion::Adaptive;

    [("baseline", plain), ("+deprompt", prompt), ("+skip", skip), ("+adaptive", adaptive)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub row: usize,
    pub label: String,
    pub n_shot: usize,
    pub completed: usize,
    pub failed: usize,
    /// (min, median, max) nAP50 over completed seeds.
    pub nap50: Option<(f64, f64, f64)>,
    /// Median change against the previous row.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn new(rows: Vec<AblationRow>) -> Self {
        let mut shots: Vec<usize> = rows.iter().map(|r| r.n_shot).collect();
        shots.sort_unstable();
        shots.dedup();
        let mut summary = Vec::new();
        for n_shot in shots {
            let mut prev: Option<f64> = None;
            for row in 1..=4 {
                let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.n_shot == n_shot && r.row == row).collect();
                let Some(first) = mine.first() else { continue };
                let vals: Vec<f64> = mine.iter().filter_map(|r| r.nap50).collect();
                let s = spread(&vals);
                let median = s.map(|x| x.1);
                summary.push(AblationSummary {
                    row,
                    label: first.label.clone(),
                    n_shot,
                    completed: vals.len(),
                    failed: mine.len() - vals.len(),
                    nap50: s,
                    delta: match (prev, median) {
                        (Some(p), Some(m)) => Some(m - p),
                        _ => None,
                    },
                });
                prev = median;
            }
        }
        AblationTable { rows, summary }
    }

    pub fn median(&self, row: usize, n_shot: usize) -> Option<f64> {
        self.summary.iter().find(|s| s.row == row && s.n_shot == n_shot).and_then(|s| s.nap50).map(|x| x.1)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<4} {:<11} {:>6} {:>9} {:>9} {:>9} {:>9} {:>7}", "row", "label", "shot", "min", "median", "max", "delta", "failed");
        for r in &self.summary {
            let (lo, med, hi) = match r.nap50 {
                Some((a, b, c)) => (format!("{a:.4}"), format!("{b:.4}"), format!("{c:.4}")),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let delta = r.delta.map_or_else(|| "".to_string(), |d| format!("({d:+.4})"));
            let _ = writeln!(s, "{:<4} {:<11} {:>6} {:>9} {:>9} {:>9} {:>9} {:>7}", r.row, r.label, r.n_shot, lo, med, hi, delta, r.failed);
        }
        let _ = writeln!(s, "\nruns:");
        for r in &self.rows {
            let v = r.nap50.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "  row {} shot {} seed {} hash {} nap50 {} {}", r.row, r.n_shot, r.seed, &r.config_hash[..12], v, r.status);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_is_cumulative() {
        let l = ladder(&RunConfig::default());
        assert_eq!(l.len(), 4);
        assert_eq!(l[0].1.deprompt.layout, PromptLayout::Off);
        assert_eq!(l[1].1.deprompt.layout, PromptLayout::Decoupled);
        assert_eq!(l[1].1.connectivity.mode, SkipMode::Baseline);
        assert_eq!(l[2].1.connectivity.mode, SkipMode::SoftSkip);
        assert_eq!(l[2].1.connectivity.fusion, Fusion::LastLayerOnly);
        assert_eq!(l[3].1.connectivity.fusion, Fusion::Adaptive);
    }

    #[test]
    fn summary_deltas() {
        let row = |row: usize, seed: u64, v: f64| AblationRow {
            config_hash: "0".repeat(64),
            seed,
            row,
            label: format!("r{row}"),
            n_shot: 1,
            status: "ok".into(),
            nap50: Some(v),
            bap50: Some(0.0),
        };
        let mut rows = Vec::new();
        for (r, base) in [(1, 0.1), (2, 0.3), (3, 0.2), (4, 0.25)] {
            for s in 0..3 {
                rows.push(row(r, s, base + s as f64 * 0.01));
            }
        }
        rows[0].nap50 = None;
        let t = AblationTable::new(rows);
        assert_eq!(t.summary.len(), 4);
        assert_eq!(t.summary[0].failed, 1);
        assert!((t.median(1, 1).unwrap() - 0.115).abs() < 1e-12);
        assert!((t.summary[1].delta.unwrap() - (0.31 - 0.115)).abs() < 1e-12);
    }
}
