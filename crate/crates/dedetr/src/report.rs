//! Key=value evaluation reports and plot-ready CSV tables. Every row and
//! report carries the config hash and seed of the run it came from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use dedetr_core::eval::EvalReport;
use dedetr_core::synth::catalog;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

/// One `key=value` pair per line.
pub fn eval_report_kv(report: &EvalReport, config_hash: &str, seed: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config_hash={config_hash}");
    let _ = writeln!(s, "seed={seed}");
    let _ = writeln!(s, "bap50={}", report.bap50);
    let _ = writeln!(s, "nap50={}", report.nap50);
    let _ = writeln!(s, "nap75={}", report.nap75);
    let _ = writeln!(s, "best_layer={}", report.best_layer);
    let _ = writeln!(s, "n_images={}", report.n_images);
    for (c, v) in report.per_class_ap50.iter().enumerate() {
        let _ = writeln!(s, "ap50.{c}={}", opt(*v));
    }
    for (c, v) in report.per_class_ap75.iter().enumerate() {
        let _ = writeln!(s, "ap75.{c}={}", opt(*v));
    }
    for (j, v) in report.layer_nap50.iter().enumerate() {
        let _ = writeln!(s, "layer_nap50.{}={v}", j + 1);
    }
    s
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::format("report", format!("line {} has no '='", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T, CliError> {
    kv.get(key)
        .ok_or_else(|| CliError::format("report", format!("missing {key}")))?
        .parse()
        .map_err(|_| CliError::format("report", format!("bad value for {key}")))
}

fn indexed(kv: &BTreeMap<String, String>, prefix: &str, start: usize) -> Result<Vec<Option<f64>>, CliError> {
    let mut out = Vec::new();
    for i in start.. {
        let Some(v) = kv.get(&format!("{prefix}.{i}")) else { break };
        out.push(if v == "none" {
            None
        } else {
            Some(v.parse().map_err(|_| CliError::format("report", format!("bad value for {prefix}.{i}")))?)
        });
    }
    Ok(out)
}

/// Inverse of [`eval_report_kv`]: the report plus its config hash and seed.
pub fn parse_eval_report(text: &str) -> Result<(EvalReport, String, u64), CliError> {
    let kv = parse_kv(text)?;
    let report = EvalReport {
        per_class_ap50: indexed(&kv, "ap50", 0)?,
        per_class_ap75: indexed(&kv, "ap75", 0)?,
        bap50: num(&kv, "bap50")?,
        nap50: num(&kv, "nap50")?,
        nap75: num(&kv, "nap75")?,
        layer_nap50: indexed(&kv, "layer_nap50", 1)?.into_iter().map(|v| v.unwrap_or(0.0)).collect(),
        best_layer: num(&kv, "best_layer")?,
        n_images: num(&kv, "n_images")?,
    };
    let hash = kv.get("config_hash").cloned().ok_or_else(|| CliError::format("report", "missing config_hash"))?;
    Ok((report, hash, num(&kv, "seed")?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub config_hash: String,
    pub seed: u64,
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApRow {
    pub config_hash: String,
    pub seed: u64,
    pub class_id: usize,
    pub class_name: String,
    pub split: String,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub config_hash: String,
    pub seed: u64,
    pub layer: usize,
    pub nap50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_hash: String,
    pub seed: u64,
    pub row: usize,
    pub label: String,
    pub n_shot: usize,
    pub status: String,
    pub nap50: Option<f64>,
    pub bap50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
    pub w: f64,
    pub nap50: f64,
    pub bap50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRow {
    pub config_hash: String,
    pub seed: u64,
    pub mode: String,
    pub extra_params: usize,
    pub status: String,
    pub nap50: Option<f64>,
    pub bap50: Option<f64>,
}

/// Column names of the ablation export, in file order.
pub const ABLATION_COLUMNS: [&str; 8] = ["config_hash", "seed", "row", "label", "n_shot", "status", "nap50", "bap50"];

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format("csv", e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::format("csv", e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::format("csv", e.to_string()))?;
    r.deserialize().map(|x| x.map_err(|e| CliError::format("csv", e.to_string()))).collect()
}

/// Rewrites a delimited table with another field delimiter.
pub fn convert_table(src: &Path, from: u8, dst: &Path, delimiter: u8) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::format("csv", e.to_string());
    let mut r = csv::ReaderBuilder::new().delimiter(from).from_path(src).map_err(err)?;
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_path(dst).map_err(err)?;
    w.write_record(r.headers().map_err(err)?).map_err(err)?;
    for rec in r.records() {
        w.write_record(&rec.map_err(err)?).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(dst, e))
}

pub fn ap_rows(report: &EvalReport, novel: &[usize], config_hash: &str, seed: u64) -> Vec<ApRow> {
    let names = catalog();
    report
        .per_class_ap50
        .iter()
        .zip(&report.per_class_ap75)
        .enumerate()
        .map(|(c, (a50, a75))| ApRow {
            config_hash: config_hash.to_string(),
            seed,
            class_id: c,
            class_name: names.get(c).map(|n| n.name()).unwrap_or_default(),
            split: if novel.contains(&c) { "novel" } else { "base" }.to_string(),
            ap50: *a50,
            ap75: *a75,
        })
        .collect()
}

pub fn probe_rows(report: &EvalReport, config_hash: &str, seed: u64) -> Vec<ProbeRow> {
    report
        .layer_nap50
        .iter()
        .enumerate()
        .map(|(j, &v)| ProbeRow { config_hash: config_hash.to_string(), seed, layer: j + 1, nap50: v })
        .collect()
}

/// Minimum, median (mean of the middle pair for even counts) and maximum.
pub fn spread(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    Some((v[0], median, v[n - 1]))
}
