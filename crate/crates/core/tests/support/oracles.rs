//! Reference computations written with plain loops over slices, kept
//! independent of the tape so they can serve as test oracles. Matrices are
//! row-major.

#![allow(dead_code)]

use dedetr_core::nn::ParamStore;

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Softmax down each column of a `rows x cols` matrix.
pub fn softmax_columns(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for j in 0..cols {
        let col: Vec<f64> = (0..rows).map(|i| m[i * cols + j]).collect();
        for (i, p) in softmax(&col).into_iter().enumerate() {
            out[i * cols + j] = p;
        }
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

pub fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let sd = (var + 1e-5).sqrt();
        for (c, v) in row.iter().enumerate() {
            out.push((v - mean) / sd * gamma[c] + beta[c]);
        }
    }
    out
}

fn p<'a>(params: &'a ParamStore, name: &str) -> &'a [f64] {
    params.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).data()
}

pub fn linear(params: &ParamStore, prefix: &str, x: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = matmul(x, p(params, &format!("{prefix}.weight")), rows, din, dout);
    let b = p(params, &format!("{prefix}.bias"));
    for r in 0..rows {
        for c in 0..dout {
            y[r * dout + c] += b[c];
        }
    }
    y
}

/// Multi-head scaled dot-product attention with q/k/v/out projections.
pub fn attention(params: &ParamStore, prefix: &str, query: &[f64], kv: &[f64], d: usize, heads: usize) -> Vec<f64> {
    let tq = query.len() / d;
    let tk = kv.len() / d;
    let q = linear(params, &format!("{prefix}.q"), query, tq, d, d);
    let k = linear(params, &format!("{prefix}.k"), kv, tk, d, d);
    let v = linear(params, &format!("{prefix}.v"), kv, tk, d, d);
    let hd = d / heads;
    let mut merged = vec![0.0; tq * d];
    for h in 0..heads {
        for i in 0..tq {
            let scores: Vec<f64> = (0..tk)
                .map(|j| (0..hd).map(|c| q[i * d + h * hd + c] * k[j * d + h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for c in 0..hd {
                merged[i * d + h * hd + c] = (0..tk).map(|j| a[j] * v[j * d + h * hd + c]).sum();
            }
        }
    }
    linear(params, &format!("{prefix}.out"), &merged, tq, d, d)
}

/// One prompt branch: `LayerNorm(x + SelfAttention(x))`.
pub fn prompt_branch(params: &ParamStore, prefix: &str, x: &[f64], d: usize, heads: usize) -> Vec<f64> {
    let a = attention(params, &format!("{prefix}.attn"), x, x, d, heads);
    let r: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
    layer_norm(&r, d, p(params, &format!("{prefix}.norm.gamma")), p(params, &format!("{prefix}.norm.beta")))
}

/// Weighted combination of the base and novel prompt branches.
pub fn deprompt(params: &ParamStore, x: &[f64], d: usize, heads: usize, w: f64) -> Vec<f64> {
    let b = prompt_branch(params, "deprompt.base", x, d, heads);
    let n = prompt_branch(params, "deprompt.novel", x, d, heads);
    b.iter().zip(&n).map(|(u, v)| w * u + (1.0 - w) * v).collect()
}

/// Decoder memory `j` (0-based) from encoder memories `1..=6` under
/// column-normalized weights `[encoder i, decoder j]`.
pub fn learnable_skip(memories: &[Vec<f64>], logits: &[f64]) -> Vec<Vec<f64>> {
    let w = softmax_columns(logits, 6, 6);
    (0..6)
        .map(|j| {
            let mut acc = vec![0.0; memories[1].len()];
            for i in 0..6 {
                for (a, m) in acc.iter_mut().zip(&memories[i + 1]) {
                    *a += w[i * 6 + j] * m;
                }
            }
            acc
        })
        .collect()
}

/// Decoder layer `j` (1-based) mixes the last encoder memory with memory
/// `6 - j`; memory 0 is the encoder input.
pub fn soft_skip(memories: &[Vec<f64>], a: f64) -> Vec<Vec<f64>> {
    (1..=6)
        .map(|j| memories[6].iter().zip(&memories[6 - j]).map(|(h, l)| a * h + (1.0 - a) * l).collect())
        .collect()
}

pub fn adaptive_fusion(outputs: &[Vec<f64>], logits: &[f64]) -> Vec<f64> {
    let w = softmax(logits);
    let mut acc = vec![0.0; outputs[0].len()];
    for (o, wj) in outputs.iter().zip(&w) {
        for (a, v) in acc.iter_mut().zip(o) {
            *a += wj * v;
        }
    }
    acc
}

/// Minimum total cost over injective maps from rows to columns, by
/// enumerating every column sequence.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let cols = cost.first().map_or(0, |r| r.len());
    go(cost, 0, &mut vec![false; cols], 0.0, &mut best);
    best
}

/// Axis-aligned IoU of two `[x0, y0, x1, y1]` boxes.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `(image, query, score, box)` for a detection and `(image, box)` for a
/// ground truth, boxes as `[x0, y0, x1, y1]`.
pub type RefDet = (usize, usize, f64, [f64; 4]);
pub type RefGt = (usize, [f64; 4]);

/// AP as the mean, over ground-truth objects, of the best precision reached
/// at or after the rank where each object is recovered (zero for objects
/// never recovered). Detections are ranked by score, then image, then query,
/// and each takes the highest-IoU unclaimed object of its image.
pub fn brute_force_ap(dets: &[RefDet], gts: &[RefGt], threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<RefDet> = dets.to_vec();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut claimed = vec![false; gts.len()];
    let mut is_tp = Vec::new();
    for d in &ranked {
        let mut pick: Option<usize> = None;
        let mut pick_iou = threshold;
        for (g, gt) in gts.iter().enumerate() {
            if gt.0 != d.0 || claimed[g] {
                continue;
            }
            let o = iou_xyxy(d.3, gt.1);
            if o > pick_iou || (pick.is_none() && o >= threshold) {
                pick = Some(g);
                pick_iou = o;
            }
        }
        if let Some(g) = pick {
            claimed[g] = true;
        }
        is_tp.push(pick.is_some());
    }
    let precision: Vec<f64> = (0..ranked.len())
        .map(|k| is_tp[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64)
        .collect();
    let mut total = 0.0;
    for k in 0..ranked.len() {
        if is_tp[k] {
            total += precision[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    Some(total / gts.len() as f64)
}
