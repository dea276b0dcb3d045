//! Minimum-cost bipartite assignment of ground-truth objects to queries.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum MatchError {
    TooManyTargets { targets: usize, queries: usize },
    RaggedCost,
    NonFiniteCost,
}

impl fmt::Display for MatchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchError::TooManyTargets { targets, queries } => {
                write!(f, "{targets} ground-truth objects cannot be matched to {queries} queries")
            }
            MatchError::RaggedCost => f.write_str("cost matrix rows have different lengths"),
            MatchError::NonFiniteCost => f.write_str("cost matrix contains a non-finite entry"),
        }
    }
}

impl core::error::Error for MatchError {}

/// `assignment[g]` is the query matched to ground-truth object `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

/// Rectangular Hungarian algorithm with row/column potentials, restricted to
/// the given rows and columns. Returns the optimal total and, per listed
/// row, the chosen column.
fn hungarian_subset(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = cols[j - 1];
        }
    }
    let total = assign.iter().enumerate().map(|(i, &c)| cost[rows[i]][c]).sum();
    (total, assign)
}

/// Optimal injective assignment of rows (ground truth) to columns (queries).
///
/// Among optimal assignments the lexicographically smallest query sequence
/// is returned, so ties resolve toward lower query indices.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult, MatchError> {
    let n = cost.len();
    if n == 0 {
        return Ok(MatchResult { assignment: Vec::new(), total_cost: 0.0 });
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(MatchError::RaggedCost);
    }
    if n > m {
        return Err(MatchError::TooManyTargets { targets: n, queries: m });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(MatchError::NonFiniteCost);
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let (best, fallback) = hungarian_subset(cost, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + best.abs());

    let mut assignment = Vec::with_capacity(n);
    let mut used = vec![false; m];
    let mut fixed = 0.0;
    for g in 0..n {
        let rest_rows: Vec<usize> = (g + 1..n).collect();
        let mut chosen = None;
        for q in 0..m {
            if used[q] {
                continue;
            }
            let rest_cols: Vec<usize> = (0..m).filter(|&c| !used[c] && c != q).collect();
            let (rest, _) = hungarian_subset(cost, &rest_rows, &rest_cols);
            if fixed + cost[g][q] + rest <= best + tol {
                chosen = Some(q);
                break;
            }
        }
        let Some(q) = chosen else {
            // Only reachable through rounding; keep the plain optimum.
            return Ok(MatchResult { assignment: fallback, total_cost: best });
        };
        used[q] = true;
        fixed += cost[g][q];
        assignment.push(q);
    }
    let total_cost = assignment.iter().enumerate().map(|(g, &q)| cost[g][q]).sum();
    Ok(MatchResult { assignment, total_cost })
}
