//! ECM estimation: E-step posteriors, kernel profile updates for `g_c`,
//! parametric CM updates, convergence control, and multi-start
//! initialization.

mod init;
mod smoother;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{
    map_labels, validate_params, CurveSet, Dataset, ExpertParams, FitDiagnostics, FitResult,
    GatingParams, ModelConfig,
};
use crate::error::{MopleError, Result};
use crate::gating::{log_mixing_matrix, newton_update, GatingMode};
use crate::linalg::solve_spd;
use crate::metrics::EvalGrid;
use crate::selection::{bic, component_seed, effective_df};

pub use init::{initialize, initialize_seeded, RESTART_MAX_ITER, RESTART_TOL};
pub use smoother::{ExpertSmoother, Smoothed};

/// Components with less total responsibility than this are degenerate.
pub const MIN_COMPONENT_MASS: f64 = 1e-8;
/// Variance floor relative to the sample variance of `y`.
pub const VARIANCE_FLOOR_FACTOR: f64 = 1e-8;
/// Number of evaluation points for exported curves.
pub const CURVE_POINTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcmState {
    pub gating: GatingParams,
    pub experts: ExpertParams,
    #[serde(with = "crate::serde_rows")]
    pub posteriors: DMatrix<f64>,
    pub loglik: f64,
    pub iter: usize,
}

pub fn variance_floor(data: &Dataset) -> f64 {
    VARIANCE_FLOOR_FACTOR * data.y_variance()
}

fn log_normal_pdf(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * ((2.0 * PI * var).ln() + r * r / var)
}

/// `log pi_c(x_i) + log phi(y_i; mu_ic, sigma_c^2)`, n x C.
fn joint_log_density(data: &Dataset, gating: &GatingParams, experts: &ExpertParams) -> DMatrix<f64> {
    let mut l = log_mixing_matrix(gating, &data.x);
    let xb = &data.x * experts.beta.transpose();
    for c in 0..experts.components() {
        let var = experts.sigma2[c];
        for i in 0..data.n() {
            let mean = xb[(i, c)] + experts.g_values[(c, i)];
            l[(i, c)] += log_normal_pdf(data.y[i], mean, var);
        }
    }
    l
}

/// Posteriors, log posteriors and observed log-likelihood in one pass.
pub(crate) fn e_step_full(
    data: &Dataset,
    gating: &GatingParams,
    experts: &ExpertParams,
) -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let mut l = joint_log_density(data, gating, experts);
    let c = l.ncols();
    let mut z = DMatrix::zeros(data.n(), c);
    let mut total = 0.0;
    for i in 0..data.n() {
        let m = (0..c).map(|k| l[(i, k)]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..c).map(|k| (l[(i, k)] - m).exp()).sum();
        let lse = m + s.ln();
        total += lse;
        for k in 0..c {
            l[(i, k)] -= lse;
            z[(i, k)] = l[(i, k)].exp();
        }
        // exact normalisation after exponentiation
        let norm: f64 = (0..c).map(|k| z[(i, k)]).sum();
        for k in 0..c {
            z[(i, k)] /= norm;
        }
    }
    (z, l, total)
}

/// Posterior matrix and observed log-likelihood in one pass (log space).
pub fn e_step_with_loglik(
    data: &Dataset,
    gating: &GatingParams,
    experts: &ExpertParams,
) -> (DMatrix<f64>, f64) {
    let (z, _, ll) = e_step_full(data, gating, experts);
    (z, ll)
}

pub fn e_step(data: &Dataset, gating: &GatingParams, experts: &ExpertParams) -> DMatrix<f64> {
    e_step_with_loglik(data, gating, experts).0
}

/// `sum_i log sum_c pi_c(x_i) phi(y_i; x_i' beta_c + g_c(u_i), sigma_c^2)`.
pub fn observed_loglik(data: &Dataset, gating: &GatingParams, experts: &ExpertParams) -> f64 {
    e_step_with_loglik(data, gating, experts).1
}

/// Expected complete-data log-likelihood `Q` for fixed posteriors `z`.
pub fn expected_complete_loglik(
    data: &Dataset,
    gating: &GatingParams,
    experts: &ExpertParams,
    z: &DMatrix<f64>,
) -> f64 {
    let l = joint_log_density(data, gating, experts);
    l.iter()
        .zip(z.iter())
        .map(|(l, w)| if *w == 0.0 { 0.0 } else { w * l })
        .sum()
}

/// Profile solution for one component given its smoothed columns.
struct ComponentProfile {
    g_before: Vec<f64>,
    beta: Vec<f64>,
    g_after: Vec<f64>,
    sigma2_raw: f64,
}

fn profile_component(
    data: &Dataset,
    z: &[f64],
    sm: &Smoothed,
    beta_old: &[f64],
    component: usize,
) -> Result<ComponentProfile> {
    let n = data.n();
    let p = data.p();
    let mass: f64 = z.iter().sum();
    let fitted_g = |beta: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| sm.y[i] - (0..p).map(|k| sm.x[k][i] * beta[k]).sum::<f64>())
            .collect()
    };
    let g_before = fitted_g(beta_old);

    // X~ = X - S'X, y~ = y - S'y
    let xt = DMatrix::from_fn(n, p, |i, k| data.x[(i, k)] - sm.x[k][i]);
    let yt: Vec<f64> = (0..n).map(|i| data.y[i] - sm.y[i]).collect();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for i in 0..n {
        let w = z[i];
        if w == 0.0 {
            continue;
        }
        for r in 0..p {
            b[r] += w * xt[(i, r)] * yt[i];
            for s in 0..=r {
                a[(r, s)] += w * xt[(i, r)] * xt[(i, s)];
            }
        }
    }
    for r in 0..p {
        for s in 0..r {
            a[(s, r)] = a[(r, s)];
        }
    }
    let beta = solve_spd(a, &b).ok_or(MopleError::ComponentCollapse { component })?;
    let beta: Vec<f64> = beta.iter().copied().collect();
    let rss: f64 = (0..n)
        .map(|i| {
            let r = yt[i] - (0..p).map(|k| xt[(i, k)] * beta[k]).sum::<f64>();
            z[i] * r * r
        })
        .sum();
    Ok(ComponentProfile {
        g_before,
        g_after: fitted_g(&beta),
        beta,
        sigma2_raw: rss / mass,
    })
}

fn check_mass(z: &[f64], component: usize) -> Result<()> {
    let mass: f64 = z.iter().sum();
    if !(mass >= MIN_COMPONENT_MASS) {
        return Err(MopleError::DegenerateComponent { component, mass });
    }
    Ok(())
}

/// CM-step 1: `g_c(u_j)` as the responsibility- and kernel-weighted mean of
/// the partial residuals `y_i - x_i' beta_c`.
pub fn update_g(
    data: &Dataset,
    posteriors: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    smoother: &ExpertSmoother,
) -> Result<DMatrix<f64>> {
    let c = posteriors.ncols();
    let mut g = DMatrix::zeros(c, data.n());
    for k in 0..c {
        let z = posteriors.column(k);
        let z = z.as_slice();
        check_mass(z, k)?;
        let sm = smoother.smooth(data, z, None, k)?;
        let b: Vec<f64> = beta.row(k).iter().copied().collect();
        for i in 0..data.n() {
            g[(k, i)] = sm.y[i] - (0..data.p()).map(|j| sm.x[j][i] * b[j]).sum::<f64>();
        }
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct ProfileUpdate {
    pub beta: DMatrix<f64>,
    pub sigma2: Vec<f64>,
    /// `g` re-derived from the updated `beta`.
    pub g_values: DMatrix<f64>,
    /// Components whose variance was clamped at the floor.
    pub floor_hits: Vec<usize>,
}

/// CM-step 2 for the experts: profiled weighted least squares for `beta_c`
/// on `(I - S_c) X`, then `sigma_c^2` from residuals against the
/// re-derived `g_c`.
pub fn update_beta_sigma(
    data: &Dataset,
    posteriors: &DMatrix<f64>,
    smoother: &ExpertSmoother,
    floor: f64,
) -> Result<ProfileUpdate> {
    let c = posteriors.ncols();
    let zero = vec![0.0; data.p()];
    let mut beta = DMatrix::zeros(c, data.p());
    let mut g_values = DMatrix::zeros(c, data.n());
    let mut sigma2 = vec![0.0; c];
    let mut floor_hits = Vec::new();
    for k in 0..c {
        let z = posteriors.column(k);
        let z = z.as_slice();
        check_mass(z, k)?;
        let sm = smoother.smooth(data, z, None, k)?;
        let prof = profile_component(data, z, &sm, &zero, k)?;
        for j in 0..data.p() {
            beta[(k, j)] = prof.beta[j];
        }
        for i in 0..data.n() {
            g_values[(k, i)] = prof.g_after[i];
        }
        sigma2[k] = apply_floor(prof.sigma2_raw, floor, k, &mut floor_hits);
    }
    Ok(ProfileUpdate {
        beta,
        sigma2,
        g_values,
        floor_hits,
    })
}

fn apply_floor(raw: f64, floor: f64, component: usize, hits: &mut Vec<usize>) -> f64 {
    if raw < floor || !raw.is_finite() {
        log::warn!("variance of component {component} clamped at floor {floor:e} (raw {raw:e})");
        hits.push(component);
        floor
    } else {
        raw
    }
}

struct CycleOutcome {
    gating: GatingParams,
    experts: ExpertParams,
    q_before: f64,
    q_after: f64,
    floor_hits: usize,
    gating_fallback: bool,
}

/// One CM cycle (CM-step 1 then CM-step 2) at fixed posteriors.
fn cm_cycle(
    data: &Dataset,
    smoother: &ExpertSmoother,
    mode: GatingMode,
    gating: &GatingParams,
    experts: &ExpertParams,
    z: &DMatrix<f64>,
    log_z: &DMatrix<f64>,
    floor: f64,
) -> Result<CycleOutcome> {
    let c = z.ncols();
    let n = data.n();
    let p = data.p();
    let mut g_before = DMatrix::zeros(c, n);
    let mut beta = DMatrix::zeros(c, p);
    let mut g_after = DMatrix::zeros(c, n);
    let mut sigma2 = vec![0.0; c];
    let mut hits = Vec::new();
    for k in 0..c {
        let zk = z.column(k);
        let zk = zk.as_slice();
        check_mass(zk, k)?;
        let lzk = log_z.column(k);
        let sm = smoother.smooth(data, zk, Some(lzk.as_slice()), k)?;
        let old: Vec<f64> = experts.beta.row(k).iter().copied().collect();
        let prof = profile_component(data, zk, &sm, &old, k)?;
        for i in 0..n {
            g_before[(k, i)] = prof.g_before[i];
            g_after[(k, i)] = prof.g_after[i];
        }
        for j in 0..p {
            beta[(k, j)] = prof.beta[j];
        }
        sigma2[k] = apply_floor(prof.sigma2_raw, floor, k, &mut hits);
    }
    let (new_gating, gating_fallback) = match newton_update(gating, &data.x, z, mode) {
        Ok((g, _)) => (g, false),
        Err(MopleError::SingularHessian { component }) => {
            log::debug!("singular gating Hessian for component {component}; keeping previous gating");
            (gating.clone(), true)
        }
        Err(e) => return Err(e),
    };
    let before = ExpertParams {
        beta: experts.beta.clone(),
        g_values: g_before,
        sigma2: experts.sigma2.clone(),
    };
    let after = ExpertParams {
        beta,
        g_values: g_after,
        sigma2,
    };
    let q_before = expected_complete_loglik(data, gating, &before, z);
    let q_after = expected_complete_loglik(data, &new_gating, &after, z);
    Ok(CycleOutcome {
        gating: new_gating,
        experts: after,
        q_before,
        q_after,
        floor_hits: hits.len(),
        gating_fallback,
    })
}

pub(crate) enum Start {
    Params(GatingParams, ExpertParams),
    Posteriors(DMatrix<f64>),
}

pub(crate) struct EcmRun {
    pub state: EcmState,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub diagnostics: FitDiagnostics,
}

pub(crate) fn run_ecm(
    data: &Dataset,
    smoother: &ExpertSmoother,
    mode: GatingMode,
    start: Start,
    max_iter: usize,
    tol: f64,
) -> Result<EcmRun> {
    let floor = variance_floor(data);
    let mut diagnostics = FitDiagnostics {
        min_cm2_gain: f64::INFINITY,
        ..FitDiagnostics::default()
    };
    let (mut gating, mut experts) = match start {
        Start::Params(g, e) => (g, e),
        Start::Posteriors(z) => {
            let c = z.ncols();
            let zero = ExpertParams {
                beta: DMatrix::zeros(c, data.p()),
                g_values: DMatrix::zeros(c, data.n()),
                sigma2: vec![1.0; c],
            };
            let log_z = z.map(f64::ln);
            let out = cm_cycle(data, smoother, mode, &GatingParams::zeros(c, data.p()), &zero, &z, &log_z, floor)
                .map_err(|e| e.at_iteration(0))?;
            diagnostics.variance_floor_hits += out.floor_hits;
            (out.gating, out.experts)
        }
    };
    let (mut z, mut log_z, mut ll) = e_step_full(data, &gating, &experts);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter {
        let out = cm_cycle(data, smoother, mode, &gating, &experts, &z, &log_z, floor)
            .map_err(|e| e.at_iteration(it))?;
        diagnostics.min_cm2_gain = diagnostics.min_cm2_gain.min(out.q_after - out.q_before);
        diagnostics.variance_floor_hits += out.floor_hits;
        diagnostics.gating_fallbacks += usize::from(out.gating_fallback);
        gating = out.gating;
        experts = out.experts;
        let (z_new, log_z_new, ll_new) = e_step_full(data, &gating, &experts);
        if !ll_new.is_finite() {
            return Err(MopleError::DegenerateComponent {
                component: 0,
                mass: f64::NAN,
            }
            .at_iteration(it));
        }
        iterations = it;
        if ll_new < ll - 1e-10 * (1.0 + ll.abs()) {
            diagnostics.nonmonotone_steps += 1;
            log::debug!("iteration {it}: log-likelihood decreased {ll} -> {ll_new}");
        }
        let rel = (ll_new - ll).abs() / (ll.abs() + 1.0);
        z = z_new;
        log_z = log_z_new;
        ll = ll_new;
        trace.push(ll);
        if rel < tol {
            converged = true;
            break;
        }
    }
    if diagnostics.min_cm2_gain == f64::INFINITY {
        diagnostics.min_cm2_gain = 0.0;
    }
    Ok(EcmRun {
        state: EcmState {
            gating,
            experts,
            posteriors: z,
            loglik: ll,
            iter: iterations,
        },
        trace,
        converged,
        diagnostics,
    })
}

/// Runs the ECM loop from `init` until the relative log-likelihood change
/// drops below `cfg.tol` or `cfg.max_iter` is reached.
pub fn fit(data: &Dataset, cfg: &ModelConfig, init: &EcmState) -> Result<FitResult> {
    cfg.validate()?;
    validate_params(&init.gating, &init.experts, cfg, data.p())?;
    if init.experts.g_values.ncols() != data.n() {
        return Err(MopleError::InvalidParams(format!(
            "initial g_values has {} columns, data has {} rows",
            init.experts.g_values.ncols(),
            data.n()
        )));
    }
    let smoother = ExpertSmoother::for_config(cfg, data)?;
    let run = run_ecm(
        data,
        &smoother,
        GatingMode::for_config(cfg),
        Start::Params(init.gating.clone(), init.experts.clone()),
        cfg.max_iter,
        cfg.tol,
    )?;
    finish(data, cfg, &smoother, run)
}

/// Initializes with `cfg.restarts` short MoE fits seeded from `cfg.seed`,
/// then runs [`fit`].
pub fn fit_with_restarts(data: &Dataset, cfg: &ModelConfig) -> Result<FitResult> {
    let init = initialize_seeded(data, cfg, component_seed(cfg.seed, cfg.components))?;
    fit(data, cfg, &init)
}

fn finish(data: &Dataset, cfg: &ModelConfig, smoother: &ExpertSmoother, run: EcmRun) -> Result<FitResult> {
    let EcmRun {
        state,
        trace,
        converged,
        diagnostics,
    } = run;
    let (_, log_z, _) = e_step_full(data, &state.gating, &state.experts);
    let grid = EvalGrid::over_range(&data.u, CURVE_POINTS);
    let curves = evaluate_curves(data, smoother, &state.posteriors, Some(&log_z), &state.experts.beta, &grid)?;
    let df = effective_df(cfg, data);
    let labels = map_labels(&state.posteriors);
    Ok(FitResult {
        config: cfg.clone(),
        n: data.n(),
        bic: bic(state.loglik, df, data.n()),
        df,
        loglik: state.loglik,
        loglik_trace: trace,
        labels,
        posteriors: state.posteriors,
        gating: state.gating,
        experts: state.experts,
        iterations: state.iter,
        converged,
        curves,
        diagnostics,
    })
}

/// `g_c` evaluated on `grid` for every component.
pub fn evaluate_curves(
    data: &Dataset,
    smoother: &ExpertSmoother,
    posteriors: &DMatrix<f64>,
    log_posteriors: Option<&DMatrix<f64>>,
    beta: &DMatrix<f64>,
    grid: &EvalGrid,
) -> Result<CurveSet> {
    let c = posteriors.ncols();
    let mut values = DMatrix::zeros(c, grid.points.len());
    let mut fallbacks = 0;
    for k in 0..c {
        let z = posteriors.column(k);
        let b: Vec<f64> = beta.row(k).iter().copied().collect();
        let lz = log_posteriors.map(|m| m.column(k));
        let lz = lz.as_ref().map(|c| c.as_slice());
        let (v, f) = smoother.evaluate(data, z.as_slice(), lz, &b, &grid.points, k)?;
        fallbacks += f;
        for (d, val) in v.into_iter().enumerate() {
            values[(k, d)] = val;
        }
    }
    Ok(CurveSet {
        grid: grid.points.clone(),
        values,
        fallbacks,
    })
}

/// Re-creates the smoother a fit used and evaluates its curves on `grid`.
pub fn fitted_curves(data: &Dataset, fit: &FitResult, grid: &EvalGrid) -> Result<CurveSet> {
    let smoother = ExpertSmoother::for_config(&fit.config, data)?;
    let (_, log_z, _) = e_step_full(data, &fit.gating, &fit.experts);
    evaluate_curves(data, &smoother, &fit.posteriors, Some(&log_z), &fit.experts.beta, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Variant;
    use approx::assert_abs_diff_eq;

    fn toy(n: usize) -> Dataset {
        let x = DMatrix::from_fn(n, 1, |i, _| ((i * 7) % n) as f64 / n as f64);
        let u: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| 2.0 * x[(i, 0)] + (3.0 * u[i]).sin() + 0.1 * ((i * 13) % 5) as f64).collect();
        Dataset::new(y, x, u).unwrap()
    }

    fn params(c: usize, n: usize) -> (GatingParams, ExpertParams) {
        let mut g = GatingParams::zeros(c, 1);
        if c > 1 {
            g.alpha0[0] = -0.5;
            g.alpha[(0, 0)] = 2.0;
        }
        let beta = DMatrix::from_fn(c, 1, |k, _| if k == 0 { -1.0 } else { 1.5 });
        let g_values = DMatrix::from_fn(c, n, |k, i| 0.1 * k as f64 + 0.01 * i as f64);
        (g, ExpertParams { beta, g_values, sigma2: (0..c).map(|k| 0.5 / (k + 1) as f64).collect() })
    }

    #[test]
    fn standard_normal_at_zero() {
        let d = Dataset::new(vec![0.0, 1.0], DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), vec![0.0, 1.0]).unwrap();
        let e = ExpertParams {
            beta: DMatrix::zeros(1, 1),
            g_values: DMatrix::zeros(1, 2),
            sigma2: vec![1.0],
        };
        let (_, ll) = e_step_with_loglik(&d, &GatingParams::zeros(1, 1), &e);
        // y = (0, 1): log phi(0) + log phi(1)
        assert_abs_diff_eq!(ll, -0.5 * (2.0 * PI).ln() * 2.0 - 0.5, epsilon = 1e-12);
        let first = log_normal_pdf(0.0, 0.0, 1.0);
        assert_abs_diff_eq!(first, -0.91894, epsilon = 1e-5);
    }

    #[test]
    fn identical_components_collapse() {
        let d = toy(12);
        let (_, e1) = params(1, 12);
        let e2 = ExpertParams {
            beta: DMatrix::from_fn(2, 1, |_, _| e1.beta[(0, 0)]),
            g_values: DMatrix::from_fn(2, 12, |_, i| e1.g_values[(0, i)]),
            sigma2: vec![e1.sigma2[0]; 2],
        };
        let l1 = observed_loglik(&d, &GatingParams::zeros(1, 1), &e1);
        let (z, l2) = e_step_with_loglik(&d, &GatingParams::zeros(2, 1), &e2);
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-10);
        for v in z.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn loglik_matches_naive_double_loop() {
        let d = toy(5);
        let (g, e) = params(2, 5);
        let mut naive = 0.0;
        for i in 0..5 {
            let eta0 = g.alpha0[0] + d.x[(i, 0)] * g.alpha[(0, 0)];
            let pi0 = eta0.exp() / (eta0.exp() + 1.0);
            let pis = [pi0, 1.0 - pi0];
            let mut s = 0.0;
            for c in 0..2 {
                let mean = d.x[(i, 0)] * e.beta[(c, 0)] + e.g_values[(c, i)];
                let var = e.sigma2[c];
                s += pis[c] * (-(d.y[i] - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
            }
            naive += s.ln();
        }
        assert_abs_diff_eq!(observed_loglik(&d, &g, &e), naive, epsilon = 1e-12);
    }

    #[test]
    fn posterior_ratio_example() {
        let (pi0, pi1) = (0.37754, 0.62246);
        let (f0, f1) = (0.3, 0.1);
        // encode the densities through sigma2 = 1 and means
        let d = Dataset::new(vec![0.0, 1.0], DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), vec![0.0, 1.0]).unwrap();
        let mean_for = |f: f64| (-2.0 * (f * (2.0 * PI).sqrt()).ln()).sqrt();
        let e = ExpertParams {
            beta: DMatrix::zeros(2, 1),
            g_values: DMatrix::from_row_slice(2, 2, &[mean_for(f0), 0.0, mean_for(f1), 0.0]),
            sigma2: vec![1.0, 1.0],
        };
        let mut g = GatingParams::zeros(2, 1);
        g.alpha0[0] = (pi0 / pi1 as f64).ln();
        let z = e_step(&d, &g, &e);
        let direct = pi0 * f0 / (pi0 * f0 + pi1 * f1);
        assert_abs_diff_eq!(z[(0, 0)], direct, epsilon = 1e-12);
        assert_abs_diff_eq!(z[(0, 1)], 1.0 - direct, epsilon = 1e-12);
        assert_abs_diff_eq!(z[(0, 0)], 0.6453, epsilon = 1e-4);
    }

    #[test]
    fn single_component_posteriors_are_one() {
        let d = toy(8);
        let (g, e) = params(1, 8);
        let z = e_step(&d, &g, &e);
        assert!(z.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn update_g_constant_residual() {
        let n = 10;
        let u: Vec<f64> = (0..n).map(|i| i as f64 / 9.0).collect();
        let x = DMatrix::from_fn(n, 1, |i, _| (i as f64).sqrt());
        let y: Vec<f64> = (0..n).map(|i| 2.0 * x[(i, 0)] + 0.7).collect();
        let d = Dataset::new(y, x, u).unwrap();
        let z = DMatrix::from_fn(n, 2, |i, k| if k == 0 { 0.2 + 0.05 * i as f64 } else { 0.8 - 0.05 * i as f64 });
        let beta = DMatrix::from_element(2, 1, 2.0);
        let cfg = ModelConfig::new(Variant::Mople, 2, 0.3);
        let sm = ExpertSmoother::for_config(&cfg, &d).unwrap();
        let g = update_g(&d, &z, &beta, &sm).unwrap();
        for v in g.iter() {
            assert_abs_diff_eq!(*v, 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn update_g_flat_weights_is_weighted_mean() {
        let d = toy(15);
        let z = DMatrix::from_fn(15, 1, |i, _| 1.0 - 0.0 * i as f64);
        let z2 = DMatrix::from_fn(15, 2, |i, k| if k == 0 { (i as f64 + 1.0) / 16.0 } else { 1.0 - (i as f64 + 1.0) / 16.0 });
        let beta = DMatrix::from_element(2, 1, 0.4);
        let mut cfg = ModelConfig::new(Variant::Mople, 2, 1e9);
        cfg.bandwidth = 1e9;
        let sm = ExpertSmoother::for_config(&cfg, &d).unwrap();
        let g = update_g(&d, &z2, &beta, &sm).unwrap();
        for k in 0..2 {
            let num: f64 = (0..15).map(|i| z2[(i, k)] * (d.y[i] - 0.4 * d.x[(i, 0)])).sum();
            let den: f64 = (0..15).map(|i| z2[(i, k)]).sum();
            for j in 0..15 {
                assert_abs_diff_eq!(g[(k, j)], num / den, epsilon = 1e-9);
            }
        }
        let _ = z;
    }

    #[test]
    fn update_g_isolated_point() {
        let u = vec![0.0, 0.02, 0.04, 0.9];
        let x = DMatrix::from_column_slice(4, 1, &[0.1, 0.5, 0.3, 0.8]);
        let y = vec![1.0, 2.0, 0.5, 4.0];
        let d = Dataset::new(y, x, u).unwrap();
        let z = DMatrix::from_element(4, 1, 1.0);
        let beta = DMatrix::from_element(1, 1, 1.5);
        let cfg = ModelConfig::new(Variant::Mople, 1, 0.1);
        let sm = ExpertSmoother::for_config(&cfg, &d).unwrap();
        let g = update_g(&d, &z, &beta, &sm).unwrap();
        assert_abs_diff_eq!(g[(0, 3)], 4.0 - 1.5 * 0.8, epsilon = 1e-14);
    }

    #[test]
    fn update_g_degenerate_denominator_errors() {
        let u = vec![0.0, 0.02, 0.9];
        let d = Dataset::new(vec![1.0, 2.0, 3.0], DMatrix::from_column_slice(3, 1, &[0.1, 0.5, 0.3]), u).unwrap();
        let z = DMatrix::from_row_slice(3, 2, &[0.5, 0.5, 0.5, 0.5, 1.0, 0.0]);
        let cfg = ModelConfig::new(Variant::Mople, 2, 0.1);
        let sm = ExpertSmoother::for_config(&cfg, &d).unwrap();
        let err = update_g(&d, &z, &DMatrix::zeros(2, 1), &sm).unwrap_err();
        assert!(matches!(err, MopleError::BandwidthInfeasible { component: 1, .. }), "{err}");
    }

    #[test]
    fn beta_reduces_to_ols_when_smoother_is_identity_free() {
        // tiny bandwidth relative to spread: S = I would annihilate X, so use
        // the intercept smoother with all-ones weights: profile = OLS with intercept
        let d = toy(20);
        let z = DMatrix::from_element(20, 1, 1.0);
        let upd = update_beta_sigma(&d, &z, &ExpertSmoother::Intercept, 1e-12).unwrap();
        let xm = d.x.column(0).mean();
        let ym = d.y.iter().sum::<f64>() / 20.0;
        let sxy: f64 = (0..20).map(|i| (d.x[(i, 0)] - xm) * (d.y[i] - ym)).sum();
        let sxx: f64 = (0..20).map(|i| (d.x[(i, 0)] - xm).powi(2)).sum();
        assert_abs_diff_eq!(upd.beta[(0, 0)], sxy / sxx, epsilon = 1e-12);
        assert_abs_diff_eq!(upd.g_values[(0, 3)], ym - xm * sxy / sxx, epsilon = 1e-12);
    }

    #[test]
    fn zero_residual_component_hits_floor() {
        let n = 12;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let u: Vec<f64> = (0..n).map(|i| ((i * 5) % n) as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| 3.0 * i as f64 + 1.0).collect();
        let d = Dataset::new(y, x, u).unwrap();
        let z = DMatrix::from_element(n, 1, 1.0);
        let upd = update_beta_sigma(&d, &z, &ExpertSmoother::Intercept, 1e-8).unwrap();
        assert_eq!(upd.sigma2[0], 1e-8);
        assert_eq!(upd.floor_hits, vec![0]);
    }

    #[test]
    fn empty_component_is_degenerate() {
        let d = toy(6);
        let z = DMatrix::from_fn(6, 2, |_, k| if k == 0 { 1.0 } else { 0.0 });
        let err = update_beta_sigma(&d, &z, &ExpertSmoother::Intercept, 1e-8).unwrap_err();
        assert!(matches!(err, MopleError::DegenerateComponent { component: 1, .. }));
    }

    #[test]
    fn collinear_design_collapses() {
        let n = 6;
        // x is an exact linear function of u, so (I - S)X = 0 for the line smoother
        let u: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x = DMatrix::from_fn(n, 1, |i, _| 2.0 * i as f64 + 1.0);
        let d = Dataset::new(vec![1.0, 3.0, 2.0, 5.0, 4.0, 6.0], x, u).unwrap();
        let z = DMatrix::from_element(n, 1, 1.0);
        let err = update_beta_sigma(&d, &z, &ExpertSmoother::LinearInU, 1e-8).unwrap_err();
        assert!(matches!(err, MopleError::ComponentCollapse { component: 0 }));
    }
}
