//! Softmax gating network and its block Newton-Raphson CM update.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{FmplrGating, GatingParams, ModelConfig, Variant};
use crate::error::{MopleError, Result};
use crate::linalg::solve_spd;

const MAX_HALVINGS: usize = 20;

/// Which gating coefficients the CM step may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatingMode {
    /// Intercepts and slopes.
    Full,
    /// Intercepts only; slopes stay at zero.
    InterceptsOnly,
    /// Nothing moves; all coefficients stay at zero.
    Fixed,
}

impl GatingMode {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        match (cfg.variant, cfg.fmplr_gating) {
            (Variant::Fmplr, FmplrGating::FreeIntercepts) => GatingMode::InterceptsOnly,
            (Variant::Fmplr, FmplrGating::EqualProportions) => GatingMode::Fixed,
            _ => GatingMode::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatingUpdateReport {
    pub steps_taken: usize,
    pub q_before: f64,
    pub q_after: f64,
    pub halvings: usize,
}

/// `pi_c(x) = exp(eta_c) / sum_j exp(eta_j)`, computed with max subtraction.
pub fn mixing_probs(g: &GatingParams, x: &[f64]) -> Vec<f64> {
    let eta: Vec<f64> = (0..g.components()).map(|c| g.eta(c, x)).collect();
    softmax(&eta)
}

pub(crate) fn softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = eta.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log pi_c(x_i)` for all observations, n x C.
pub fn log_mixing_matrix(g: &GatingParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let c = g.components();
    let eta = linear_predictors(g, x);
    let mut out = DMatrix::zeros(n, c);
    for i in 0..n {
        let m = (0..c).map(|k| eta[(i, k)]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..c).map(|k| (eta[(i, k)] - m).exp()).sum::<f64>().ln();
        for k in 0..c {
            out[(i, k)] = eta[(i, k)] - lse;
        }
    }
    out
}

fn linear_predictors(g: &GatingParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    let c = g.components();
    // n x C = X alpha^T + 1 alpha0^T
    let mut eta = x * g.alpha.transpose();
    for k in 0..c {
        eta.column_mut(k).add_scalar_mut(g.alpha0[k]);
    }
    eta
}

/// Posterior-weighted multinomial log-likelihood `sum_i sum_c z_ic log pi_c(x_i)`.
pub fn gating_q(g: &GatingParams, x: &DMatrix<f64>, z: &DMatrix<f64>) -> f64 {
    let lp = log_mixing_matrix(g, x);
    lp.iter()
        .zip(z.iter())
        .map(|(l, w)| if *w == 0.0 { 0.0 } else { w * l })
        .sum()
}

/// Gradient of `gating_q` with respect to `(alpha_0c, alpha_c)` for each
/// non-reference component, stacked component by component.
pub fn gating_gradient(g: &GatingParams, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let (n, p) = x.shape();
    let c = g.components();
    let probs = log_mixing_matrix(g, x).map(f64::exp);
    (0..c.saturating_sub(1))
        .map(|k| {
            let mut grad = DVector::zeros(p + 1);
            for i in 0..n {
                let r = z[(i, k)] - probs[(i, k)];
                grad[0] += r;
                for j in 0..p {
                    grad[j + 1] += r * x[(i, j)];
                }
            }
            grad
        })
        .collect()
}

/// Diagonal Hessian blocks `d^2 Q / d alpha_c d alpha_c^T` (negative
/// semidefinite), one per non-reference component.
pub fn gating_hessian_blocks(g: &GatingParams, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let (n, p) = x.shape();
    let c = g.components();
    let probs = log_mixing_matrix(g, x).map(f64::exp);
    (0..c.saturating_sub(1))
        .map(|k| {
            let mut h = DMatrix::zeros(p + 1, p + 1);
            for i in 0..n {
                let w = probs[(i, k)] * (1.0 - probs[(i, k)]);
                let xt: Vec<f64> = std::iter::once(1.0).chain(x.row(i).iter().copied()).collect();
                for a in 0..=p {
                    for b in 0..=p {
                        h[(a, b)] -= w * xt[a] * xt[b];
                    }
                }
            }
            h
        })
        .collect()
}

/// One block-diagonal Newton step on the gating coefficients, with step
/// halving so that `gating_q` never decreases.
///
/// A singular Hessian block is reported as an error; callers keep the
/// previous coefficients in that case.
pub fn newton_update(
    g: &GatingParams,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    mode: GatingMode,
) -> Result<(GatingParams, GatingUpdateReport)> {
    let c = g.components();
    let p = x.ncols();
    let q_before = gating_q(g, x, z);
    let unchanged = |q| {
        (
            g.clone(),
            GatingUpdateReport {
                steps_taken: 0,
                q_before: q,
                q_after: q,
                halvings: 0,
            },
        )
    };
    if c == 1 || mode == GatingMode::Fixed {
        return Ok(unchanged(q_before));
    }
    let grads = gating_gradient(g, x, z);
    let hess = gating_hessian_blocks(g, x);
    let width = if mode == GatingMode::Full { p + 1 } else { 1 };
    let mut steps = Vec::with_capacity(c - 1);
    for k in 0..c - 1 {
        let grad = grads[k].rows(0, width).into_owned();
        let neg_h = -hess[k].view((0, 0), (width, width)).into_owned();
        let step = solve_spd(neg_h, &grad).ok_or(MopleError::SingularHessian { component: k })?;
        steps.push(step);
    }
    if steps.iter().all(|s| s.iter().all(|v| *v == 0.0)) {
        return Ok(unchanged(q_before));
    }

    let mut t = 1.0;
    for halvings in 0..=MAX_HALVINGS {
        let mut cand = g.clone();
        for (k, step) in steps.iter().enumerate() {
            cand.alpha0[k] += t * step[0];
            for j in 1..width {
                cand.alpha[(k, j - 1)] += t * step[j];
            }
        }
        let q = gating_q(&cand, x, z);
        if q.is_finite() && q >= q_before {
            return Ok((
                cand,
                GatingUpdateReport {
                    steps_taken: 1,
                    q_before,
                    q_after: q,
                    halvings,
                },
            ));
        }
        t *= 0.5;
    }
    let (same, mut report) = unchanged(q_before);
    report.halvings = MAX_HALVINGS;
    Ok((same, report))
}
