//! Two-component simulation scenarios and the Monte Carlo replication
//! harness.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{permute_components, Dataset, FitResult, ModelConfig, MoeExpert, Variant};
use crate::engine::{fitted_curves, observed_loglik, CURVE_POINTS};
use crate::error::{MopleError, Result};
use crate::metrics::{align_labels, ami, ari, coef_mse_bias, curve_mae, EvalGrid, MseBias};
use crate::rng::{derive_seed, task_rng};
use crate::selection::{default_bandwidth_grid, select};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    /// Linear `g`, covariate-dependent gating.
    CaseI,
    /// Nonlinear `g`, constant gating.
    CaseII,
    /// Nonlinear `g`, covariate-dependent gating.
    CaseIII,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::CaseI, Scenario::CaseII, Scenario::CaseIII];

    /// Accepts `1`, `I`, `case1`, `CaseI` and similar spellings.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let t = t.strip_prefix("case").unwrap_or(&t).trim_start_matches(['_', '-', ' ']);
        match t {
            "1" | "i" => Ok(Scenario::CaseI),
            "2" | "ii" => Ok(Scenario::CaseII),
            "3" | "iii" => Ok(Scenario::CaseIII),
            _ => Err(MopleError::InvalidConfig(format!("unknown scenario {s:?}"))),
        }
    }

    fn index(self) -> u64 {
        match self {
            Scenario::CaseI => 1,
            Scenario::CaseII => 2,
            Scenario::CaseIII => 3,
        }
    }

    pub fn spec(self) -> ScenarioSpec {
        let (alpha01, alpha11) = match self {
            Scenario::CaseII => (0.0, 0.0),
            Scenario::CaseI | Scenario::CaseIII => (-0.5, 2.0),
        };
        ScenarioSpec {
            name: self,
            gating: (alpha01, alpha11),
            beta: [-3.0, 3.0],
            sigma2: [0.5, 0.25],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::CaseI => "case1",
            Scenario::CaseII => "case2",
            Scenario::CaseIII => "case3",
        })
    }
}

/// True generating parameters. Component 1 (index 0) is chosen with
/// probability `logistic(alpha01 + alpha11 x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: Scenario,
    pub gating: (f64, f64),
    pub beta: [f64; 2],
    pub sigma2: [f64; 2],
}

impl ScenarioSpec {
    pub fn g(&self, component: usize, u: f64) -> f64 {
        match (self.name, component) {
            (Scenario::CaseI, 0) => -3.0 * u,
            (Scenario::CaseI, _) => 3.0 * u,
            (_, 0) => 2.0 * u * u,
            (_, _) => 2.0 * (PI * u).cos().powi(2),
        }
    }

    pub fn prob_first(&self, x: f64) -> f64 {
        let eta = self.gating.0 + self.gating.1 * x;
        1.0 / (1.0 + (-eta).exp())
    }

    pub fn true_beta(&self) -> Vec<Vec<f64>> {
        self.beta.iter().map(|&b| vec![b]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSample {
    pub data: Dataset,
    /// 0 for component 1, 1 for component 2.
    pub labels: Vec<usize>,
}

/// Draws `x, u ~ U(0, 1)` independently, the component from the gating
/// network, and `y = x beta_c + g_c(u) + N(0, sigma_c^2)`.
pub fn generate<R: Rng + ?Sized>(spec: &ScenarioSpec, n: usize, rng: &mut R) -> Result<SimulatedSample> {
    let noise = [
        Normal::new(0.0, spec.sigma2[0].sqrt()).expect("positive variance"),
        Normal::new(0.0, spec.sigma2[1].sqrt()).expect("positive variance"),
    ];
    let mut x = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = rng.random();
        let ui: f64 = rng.random();
        let c = if rng.random::<f64>() < spec.prob_first(xi) { 0 } else { 1 };
        let e = noise[c].sample(rng);
        x.push(xi);
        u.push(ui);
        y.push(xi * spec.beta[c] + spec.g(c, ui) + e);
        labels.push(c);
    }
    let data = Dataset::with_names(y, DMatrix::from_vec(n, 1, x), u, vec!["x".into()])?;
    Ok(SimulatedSample { data, labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Variant>,
    pub n_list: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Expert form of the MoE baseline.
    pub moe_expert: MoeExpert,
    /// Bandwidths searched per replication, as fractions of the range of
    /// `u`; `None` uses the default log grid.
    pub bandwidth_fractions: Option<Vec<f64>>,
}

impl StudyConfig {
    pub fn new(scenarios: Vec<Scenario>, n_list: Vec<usize>, replications: usize, seed: u64) -> Self {
        StudyConfig {
            scenarios,
            methods: vec![Variant::Moe, Variant::Fmplr, Variant::Mople],
            n_list,
            replications,
            seed,
            restarts: 10,
            max_iter: 500,
            tol: 1e-8,
            moe_expert: MoeExpert::LinearInU,
            bandwidth_fractions: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(MopleError::InvalidConfig("replications must be at least 1".into()));
        }
        if self.scenarios.is_empty() || self.methods.is_empty() || self.n_list.is_empty() {
            return Err(MopleError::InvalidConfig(
                "scenarios, methods and sample sizes must be nonempty".into(),
            ));
        }
        if let Some(&n) = self.n_list.iter().find(|&&n| n < 10) {
            return Err(MopleError::InvalidConfig(format!("sample size {n} is too small")));
        }
        Ok(())
    }

    /// Seed of the data shared by every method in one replication.
    pub fn data_seed(&self, scenario: Scenario, n: usize, replication: usize) -> u64 {
        derive_seed(self.seed, &[scenario.index(), n as u64, replication as u64])
    }

    pub fn fit_seed(&self, scenario: Scenario, method: Variant, n: usize, replication: usize) -> u64 {
        let m = match method {
            Variant::Moe => 1,
            Variant::Fmplr => 2,
            Variant::Mople => 3,
        };
        derive_seed(self.seed, &[scenario.index(), m, n as u64, replication as u64])
    }

    pub fn sample(&self, scenario: Scenario, n: usize, replication: usize) -> Result<SimulatedSample> {
        let mut rng = task_rng(self.data_seed(scenario, n, replication), &[]);
        generate(&scenario.spec(), n, &mut rng)
    }
}

/// Metrics of one fitted replication, aligned to the true components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub bandwidth: f64,
    pub beta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub mae: Vec<f64>,
    pub ari: f64,
    pub ami: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest deviation of a posterior row sum from 1.
    pub row_sum_error: f64,
    /// Smallest CM-step gain over every bandwidth fitted.
    pub min_cm2_gain: f64,
    /// Log-likelihood change after reversing the component order.
    pub permutation_shift: f64,
    pub curve_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub scenario: Scenario,
    pub method: Variant,
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub metrics: Option<ReplicationMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub scenario: Scenario,
    pub method: Variant,
    pub n: usize,
    pub ok: usize,
    pub failures: usize,
    pub beta: Vec<MseBias>,
    pub mae: Vec<f64>,
    pub ari: f64,
    pub ami: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub config: StudyConfig,
    pub records: Vec<ReplicationRecord>,
    pub summaries: Vec<MethodSummary>,
}

fn method_template(cfg: &StudyConfig, method: Variant) -> ModelConfig {
    let mut m = ModelConfig::new(method, 2, 1.0);
    m.restarts = cfg.restarts;
    m.max_iter = cfg.max_iter;
    m.tol = cfg.tol;
    m.moe_expert = cfg.moe_expert;
    m
}

fn bandwidths_for(cfg: &StudyConfig, data: &Dataset) -> Vec<f64> {
    match &cfg.bandwidth_fractions {
        Some(f) => f.iter().map(|v| v * data.u_range()).collect(),
        None => default_bandwidth_grid(data),
    }
}

/// Aligns a fit to the truth and computes every per-replication measure.
pub fn evaluate_fit(
    spec: &ScenarioSpec,
    sample: &SimulatedSample,
    fit: &FitResult,
) -> Result<ReplicationMetrics> {
    let data = &sample.data;
    let align = align_labels(&fit.experts, &spec.true_beta(), &spec.sigma2)?;
    let grid = EvalGrid::over_range(&data.u, CURVE_POINTS);
    let curves = fitted_curves(data, fit, &grid)?;
    let mut mae = Vec::with_capacity(2);
    for c in 0..2 {
        let k = align.perm[c];
        let values: Vec<f64> = curves.values.row(k).iter().copied().collect();
        mae.push(curve_mae(&values, |u| spec.g(c, u), &grid)?);
    }
    let row_sum_error = fit
        .posteriors
        .row_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let reversed: Vec<usize> = (0..fit.config.components).rev().collect();
    let (pg, pe) = permute_components(&fit.gating, &fit.experts, &reversed);
    let permutation_shift = (observed_loglik(data, &pg, &pe) - fit.loglik).abs();
    Ok(ReplicationMetrics {
        bandwidth: fit.config.bandwidth,
        beta: align.perm.iter().map(|&k| fit.experts.beta[(k, 0)]).collect(),
        sigma2: align.perm.iter().map(|&k| fit.experts.sigma2[k]).collect(),
        mae,
        ari: ari(&fit.labels, &sample.labels)?,
        ami: ami(&fit.labels, &sample.labels)?,
        loglik: fit.loglik,
        iterations: fit.iterations,
        converged: fit.converged,
        row_sum_error,
        min_cm2_gain: fit.diagnostics.min_cm2_gain,
        permutation_shift,
        curve_fallbacks: curves.fallbacks,
    })
}

/// Fits one method to one replication: bandwidth by BIC, `C = 2`.
pub fn run_replication(
    cfg: &StudyConfig,
    scenario: Scenario,
    method: Variant,
    n: usize,
    replication: usize,
) -> ReplicationRecord {
    let seed = cfg.fit_seed(scenario, method, n, replication);
    let spec = scenario.spec();
    let outcome = cfg.sample(scenario, n, replication).and_then(|sample| {
        let hs = bandwidths_for(cfg, &sample.data);
        let (_, grid, fit) = select(&sample.data, &method_template(cfg, method), &[2], &hs, seed)?;
        let mut m = evaluate_fit(&spec, &sample, &fit)?;
        m.min_cm2_gain = grid
            .cells
            .iter()
            .filter_map(|c| c.min_cm2_gain)
            .fold(m.min_cm2_gain, f64::min);
        Ok(m)
    });
    match outcome {
        Ok(m) => {
            log::info!(
                "{scenario} {method} n={n} rep={replication}: ARI {:.3}, h {:.3}",
                m.ari,
                m.bandwidth
            );
            ReplicationRecord {
                scenario,
                method,
                n,
                replication,
                seed,
                metrics: Some(m),
                error: None,
            }
        }
        Err(e) => {
            log::warn!("{scenario} {method} n={n} rep={replication} failed: {e}");
            ReplicationRecord {
                scenario,
                method,
                n,
                replication,
                seed,
                metrics: None,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Aggregates records per (scenario, method, n) in first-seen order.
pub fn summarize(records: &[ReplicationRecord]) -> Vec<MethodSummary> {
    let mut keys: Vec<(Scenario, Variant, usize)> = Vec::new();
    for r in records {
        let k = (r.scenario, r.method, r.n);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(scenario, method, n)| {
            let group: Vec<&ReplicationRecord> = records
                .iter()
                .filter(|r| r.scenario == scenario && r.method == method && r.n == n)
                .collect();
            let ok: Vec<&ReplicationMetrics> = group.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let spec = scenario.spec();
            let mean = |f: &dyn Fn(&ReplicationMetrics) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64
                }
            };
            let beta = (0..2)
                .map(|c| {
                    let est: Vec<f64> = ok.iter().map(|m| m.beta[c]).collect();
                    coef_mse_bias(&est, spec.beta[c]).unwrap_or(MseBias {
                        mse: f64::NAN,
                        bias: f64::NAN,
                    })
                })
                .collect();
            MethodSummary {
                scenario,
                method,
                n,
                ok: ok.len(),
                failures: group.len() - ok.len(),
                beta,
                mae: (0..2).map(|c| mean(&|m| m.mae[c])).collect(),
                ari: mean(&|m| m.ari),
                ami: mean(&|m| m.ami),
            }
        })
        .collect()
}

/// Runs every (scenario, method, n, replication) task.
pub fn run_study(cfg: &StudyConfig) -> Result<ReplicationReport> {
    cfg.validate()?;
    let mut tasks = Vec::new();
    for &s in &cfg.scenarios {
        for &m in &cfg.methods {
            for &n in &cfg.n_list {
                for r in 0..cfg.replications {
                    tasks.push((s, m, n, r));
                }
            }
        }
    }
    let records: Vec<ReplicationRecord> = tasks
        .par_iter()
        .map(|&(s, m, n, r)| run_replication(cfg, s, m, n, r))
        .collect();
    let summaries = summarize(&records);
    Ok(ReplicationReport {
        config: cfg.clone(),
        records,
        summaries,
    })
}

fn io_err(e: impl fmt::Display) -> MopleError {
    MopleError::Io {
        path: "report".into(),
        message: e.to_string(),
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

impl ReplicationReport {
    pub fn summary(&self, scenario: Scenario, method: Variant, n: usize) -> Option<&MethodSummary> {
        self.summaries
            .iter()
            .find(|s| s.scenario == scenario && s.method == method && s.n == n)
    }

    /// One row per (scenario, method, n), laid out like the published tables.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "scenario", "method", "n", "ok", "failures", "beta1_mse", "beta1_bias", "beta2_mse",
            "beta2_bias", "g1_mae", "g2_mae", "ari", "ami",
        ])
        .map_err(io_err)?;
        for s in &self.summaries {
            w.write_record([
                s.scenario.to_string(),
                s.method.to_string(),
                s.n.to_string(),
                s.ok.to_string(),
                s.failures.to_string(),
                num(s.beta[0].mse),
                num(s.beta[0].bias),
                num(s.beta[1].mse),
                num(s.beta[1].bias),
                num(s.mae[0]),
                num(s.mae[1]),
                num(s.ari),
                num(s.ami),
            ])
            .map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn write_records_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "scenario", "method", "n", "replication", "seed", "status", "bandwidth", "beta1",
            "beta2", "sigma2_1", "sigma2_2", "g1_mae", "g2_mae", "ari", "ami", "loglik",
            "iterations", "converged", "error",
        ])
        .map_err(io_err)?;
        for r in &self.records {
            let mut row = vec![
                r.scenario.to_string(),
                r.method.to_string(),
                r.n.to_string(),
                r.replication.to_string(),
                r.seed.to_string(),
            ];
            match &r.metrics {
                Some(m) => {
                    row.push("ok".into());
                    row.extend(
                        [
                            m.bandwidth, m.beta[0], m.beta[1], m.sigma2[0], m.sigma2[1], m.mae[0],
                            m.mae[1], m.ari, m.ami, m.loglik,
                        ]
                        .map(num),
                    );
                    row.push(m.iterations.to_string());
                    row.push(m.converged.to_string());
                    row.push(String::new());
                }
                None => {
                    row.push("failed".into());
                    row.extend(std::iter::repeat_n(String::new(), 12));
                    row.push(r.error.clone().unwrap_or_default());
                }
            }
            w.write_record(&row).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }
}
