//! Evaluation measures: coefficient bias and MSE after label alignment,
//! curve MAE on a fixed grid, and the chance-adjusted partition indices
//! ARI and AMI.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{min_max, ExpertParams};
use crate::error::{MopleError, Result};

/// Evaluation points `u_1 < ... < u_D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub points: Vec<f64>,
}

impl EvalGrid {
    /// `d` evenly spaced points from `min(u)` to `max(u)` inclusive.
    pub fn over_range(u: &[f64], d: usize) -> Self {
        let (lo, hi) = min_max(u);
        Self::linspace(lo, hi, d)
    }

    pub fn linspace(lo: f64, hi: f64, d: usize) -> Self {
        let points = match d {
            0 => Vec::new(),
            1 => vec![lo],
            _ => (0..d)
                .map(|k| {
                    if k == d - 1 {
                        hi
                    } else {
                        lo + (hi - lo) * k as f64 / (d - 1) as f64
                    }
                })
                .collect(),
        };
        EvalGrid { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `perm[c]` is the estimated component matched to true component `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAlignment {
    pub perm: Vec<usize>,
    pub cost: f64,
}

/// Calls `f` with every permutation of `0..n` in lexicographic order.
pub fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        f(&p);
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("pivot exists");
        p.swap(i - 1, j);
        p[i..].reverse();
    }
}

/// Permutation minimizing `sum_c |beta_hat_perm(c) - beta_c|^2 +
/// (sigma2_hat_perm(c) - sigma2_c)^2`, found by exhaustive search.
pub fn align_labels(
    est: &ExpertParams,
    true_beta: &[Vec<f64>],
    true_sigma2: &[f64],
) -> Result<LabelAlignment> {
    let c = est.components();
    if true_beta.len() != c || true_sigma2.len() != c {
        return Err(MopleError::InvalidParams(format!(
            "cannot align {c} estimated components with {} true components",
            true_beta.len()
        )));
    }
    if c > 6 {
        return Err(MopleError::InvalidParams(format!(
            "exhaustive alignment supports at most 6 components, got {c}"
        )));
    }
    let p = est.beta.ncols();
    let cost = |k: usize, t: usize| -> f64 {
        let b: f64 = (0..p).map(|j| (est.beta[(k, j)] - true_beta[t][j]).powi(2)).sum();
        b + (est.sigma2[k] - true_sigma2[t]).powi(2)
    };
    let mut best = LabelAlignment {
        perm: (0..c).collect(),
        cost: f64::INFINITY,
    };
    for_each_permutation(c, |perm| {
        let total: f64 = perm.iter().enumerate().map(|(t, &k)| cost(k, t)).sum();
        if total < best.cost {
            best = LabelAlignment {
                perm: perm.to_vec(),
                cost: total,
            };
        }
    });
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseBias {
    pub mse: f64,
    pub bias: f64,
}

/// Bias `(1/r) sum (est - truth)` and MSE `(1/r) sum (est - truth)^2`.
pub fn coef_mse_bias(estimates: &[f64], truth: f64) -> Result<MseBias> {
    if estimates.is_empty() {
        return Err(MopleError::InvalidData(
            "bias and MSE need at least one replication".into(),
        ));
    }
    let r = estimates.len() as f64;
    let bias = estimates.iter().map(|e| e - truth).sum::<f64>() / r;
    let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / r;
    Ok(MseBias { mse, bias })
}

/// `D^{-1} sum_d |g_hat(u_d) - g(u_d)|`.
pub fn curve_mae(g_hat: &[f64], g_true: impl Fn(f64) -> f64, grid: &EvalGrid) -> Result<f64> {
    if g_hat.len() != grid.len() || grid.is_empty() {
        return Err(MopleError::InvalidData(format!(
            "curve has {} values for a grid of {} points",
            g_hat.len(),
            grid.len()
        )));
    }
    let total: f64 = g_hat
        .iter()
        .zip(&grid.points)
        .map(|(h, &u)| (h - g_true(u)).abs())
        .sum();
    Ok(total / grid.len() as f64)
}

struct Contingency {
    n: usize,
    table: Vec<Vec<usize>>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn relabel(a: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let ids = a
        .iter()
        .map(|v| {
            let next = map.len();
            *map.entry(*v).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

fn contingency(a: &[usize], b: &[usize]) -> Result<Contingency> {
    if a.len() != b.len() {
        return Err(MopleError::LabelLengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(MopleError::InvalidData(
            "partition comparison needs at least two observations".into(),
        ));
    }
    let (ia, ka) = relabel(a);
    let (ib, kb) = relabel(b);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&i, &j) in ia.iter().zip(&ib) {
        table[i][j] += 1;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Ok(Contingency {
        n: a.len(),
        table,
        rows,
        cols,
    })
}

fn identical_up_to_renaming(a: &[usize], b: &[usize]) -> bool {
    relabel(a).0 == relabel(b).0
}

fn pairs(k: usize) -> f64 {
    (k * k.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand index under the permutation model.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = contingency(a, b)?;
    let index: f64 = t.table.iter().flatten().map(|&v| pairs(v)).sum();
    let sa: f64 = t.rows.iter().map(|&v| pairs(v)).sum();
    let sb: f64 = t.cols.iter().map(|&v| pairs(v)).sum();
    let expected = sa * sb / pairs(t.n);
    let max = 0.5 * (sa + sb);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(if identical_up_to_renaming(a, b) { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(t: &Contingency) -> f64 {
    let n = t.n as f64;
    let mut mi = 0.0;
    for (i, row) in t.table.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > 0 {
                let v = v as f64;
                mi += v / n * (n * v / (t.rows[i] as f64 * t.cols[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    for k in 1..=n {
        out[k] = out[k - 1] + (k as f64).ln();
    }
    out
}

/// Expected mutual information between random partitions with the given
/// cluster sizes (hypergeometric model).
pub fn expected_mutual_information(rows: &[usize], cols: &[usize], n: usize) -> f64 {
    let lf = ln_factorials(n);
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in rows {
        for &b in cols {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            for nij in lo..=hi {
                let v = nij as f64;
                let term = v / nf * (nf * v / (a as f64 * b as f64)).ln();
                let log_p = lf[a] + lf[b] + lf[n - a] + lf[n - b]
                    - lf[n]
                    - lf[nij]
                    - lf[a - nij]
                    - lf[b - nij]
                    - lf[n + nij - a - b];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information with max-entropy normalization.
pub fn ami(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = contingency(a, b)?;
    let mi = mutual_information(&t);
    let emi = expected_mutual_information(&t.rows, &t.cols, t.n);
    let h = entropy(&t.rows, t.n).max(entropy(&t.cols, t.n));
    let denom = h - emi;
    if denom.abs() < 1e-15 {
        return Ok(if identical_up_to_renaming(a, b) { 1.0 } else { 0.0 });
    }
    Ok((mi - emi) / denom)
}
