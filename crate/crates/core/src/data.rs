//! Shared domain types, their invariants, and CSV ingestion.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MopleError, Result};
use crate::kernel::KernelKind;

/// Which member of the model family is being fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Mixture of linear experts: covariate-dependent gating, parametric experts.
    Moe,
    /// Finite mixture of partially linear regressions: gating slopes fixed at zero.
    Fmplr,
    /// Mixture of partially linear experts.
    Mople,
}

impl Variant {
    pub fn uses_kernel(self) -> bool {
        matches!(self, Variant::Fmplr | Variant::Mople)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "moe" => Ok(Variant::Moe),
            "fmplr" => Ok(Variant::Fmplr),
            "mople" => Ok(Variant::Mople),
            other => Err(MopleError::InvalidConfig(format!("unknown model {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Moe => "MoE",
            Variant::Fmplr => "FMPLR",
            Variant::Mople => "MoPLE",
        })
    }
}

/// Form of the per-component `g_c` in the MoE baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeExpert {
    /// `g_c(u) = b_{0c}`: the classical intercept.
    #[default]
    Intercept,
    /// `g_c(u) = b_{0c} + b_{uc} u`: `u` enters the experts as an ordinary
    /// linear covariate (but not the gating network).
    LinearInU,
}

/// Gating constraint for the FMPLR variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmplrGating {
    /// Slopes are zero, intercepts are estimated (constant mixing proportions).
    #[default]
    FreeIntercepts,
    /// All gating coefficients are zero, so every `pi_c = 1/C`.
    EqualProportions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub components: usize,
    /// Kernel bandwidth in units of `u`; ignored by the MoE variant.
    pub bandwidth: f64,
    pub kernel: KernelKind,
    pub max_iter: usize,
    /// Relative log-likelihood change that stops the ECM loop.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    #[serde(default)]
    pub moe_expert: MoeExpert,
    #[serde(default)]
    pub fmplr_gating: FmplrGating,
}

impl ModelConfig {
    pub fn new(variant: Variant, components: usize, bandwidth: f64) -> Self {
        ModelConfig {
            variant,
            components,
            bandwidth,
            kernel: KernelKind::Epanechnikov,
            max_iter: 500,
            tol: 1e-8,
            restarts: 10,
            seed: 0,
            moe_expert: MoeExpert::Intercept,
            fmplr_gating: FmplrGating::FreeIntercepts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(MopleError::InvalidConfig(
                "component count C must be at least 1".into(),
            ));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(MopleError::InvalidConfig(format!(
                "bandwidth h must be positive and finite, got {}",
                self.bandwidth
            )));
        }
        if !(self.tol > 0.0) {
            return Err(MopleError::InvalidConfig(format!(
                "tolerance must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(MopleError::InvalidConfig("max_iter must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(MopleError::InvalidConfig("restarts must be positive".into()));
        }
        Ok(())
    }
}

/// Observed sample: response `y`, linear covariates `x` (n x p) and the
/// scalar nonparametric covariate `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub u: Vec<f64>,
    pub x_names: Vec<String>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, x: DMatrix<f64>, u: Vec<f64>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(y, x, u, names)
    }

    pub fn with_names(
        y: Vec<f64>,
        x: DMatrix<f64>,
        u: Vec<f64>,
        x_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(MopleError::InvalidData("dataset has no observations".into()));
        }
        if x.nrows() != n || u.len() != n {
            return Err(MopleError::InvalidData(format!(
                "length mismatch: y has {n} rows, x has {}, u has {}",
                x.nrows(),
                u.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(MopleError::InvalidData(
                "at least one linear covariate is required".into(),
            ));
        }
        if x_names.len() != x.ncols() {
            return Err(MopleError::InvalidData("one name per x column required".into()));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(MopleError::InvalidData(format!("y is not finite at row {i}")));
        }
        if let Some(i) = u.iter().position(|v| !v.is_finite()) {
            return Err(MopleError::InvalidData(format!("u is not finite at row {i}")));
        }
        for (j, col) in x.column_iter().enumerate() {
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(MopleError::InvalidData(format!(
                    "column {} is not finite at row {i}",
                    x_names[j]
                )));
            }
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                return Err(MopleError::InvalidData(format!(
                    "column {} is constant; x must not contain a constant",
                    x_names[j]
                )));
            }
        }
        let (lo, hi) = min_max(&u);
        if !(hi > lo) {
            return Err(MopleError::InvalidData(
                "nonparametric covariate u is constant".into(),
            ));
        }
        Ok(Dataset { y, x, u, x_names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// `|Omega|`: observed range of `u`.
    pub fn u_range(&self) -> f64 {
        let (lo, hi) = min_max(&self.u);
        hi - lo
    }

    pub fn u_bounds(&self) -> (f64, f64) {
        min_max(&self.u)
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Sample variance of `y` (denominator n).
    pub fn y_variance(&self) -> f64 {
        let n = self.n() as f64;
        let mean = self.y.iter().sum::<f64>() / n;
        self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }
}

pub(crate) fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Names of the CSV columns bound to `y`, `x` and `u`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    pub y: String,
    pub x: Vec<String>,
    pub u: String,
}

impl ColumnSchema {
    pub fn new(y: &str, x: &[&str], u: &str) -> Self {
        ColumnSchema {
            y: y.to_string(),
            x: x.iter().map(|s| s.to_string()).collect(),
            u: u.to_string(),
        }
    }
}

/// Reads a comma-delimited file with a header row and binds columns by name.
///
/// Rows with an empty or `NA` cell in any selected column are rejected.
pub fn load_dataset(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let io_err = |message: String| MopleError::Io {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| io_err(e.to_string()))?.clone();
    let index_of = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            MopleError::InvalidData(format!(
                "{}: column {name:?} not found (have: {})",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })
    };
    let y_idx = index_of(&schema.y)?;
    let u_idx = index_of(&schema.u)?;
    let x_idx = schema
        .x
        .iter()
        .map(|name| index_of(name))
        .collect::<Result<Vec<_>>>()?;

    let mut y = Vec::new();
    let mut u = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        // header is line 1
        let line = row_no + 2;
        let record = record.map_err(|e| io_err(format!("line {line}: {e}")))?;
        let cell = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
                return Err(MopleError::InvalidData(format!(
                    "{}: line {line}, column {name:?}: missing value",
                    path.display()
                )));
            }
            raw.parse::<f64>().map_err(|_| {
                MopleError::InvalidData(format!(
                    "{}: line {line}, column {name:?}: cannot parse {raw:?} as a number",
                    path.display()
                ))
            })
        };
        y.push(cell(y_idx, &schema.y)?);
        u.push(cell(u_idx, &schema.u)?);
        x_rows.push(
            x_idx
                .iter()
                .zip(&schema.x)
                .map(|(&idx, name)| cell(idx, name))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if y.is_empty() {
        return Err(MopleError::InvalidData(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let p = schema.x.len();
    let x = DMatrix::from_fn(y.len(), p, |i, j| x_rows[i][j]);
    Dataset::with_names(y, x, u, schema.x.clone())
}

/// Softmax gating coefficients. Row `C - 1` is the zero reference row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    pub alpha0: Vec<f64>,
    #[serde(with = "crate::serde_rows")]
    pub alpha: DMatrix<f64>,
}

impl GatingParams {
    pub fn zeros(components: usize, p: usize) -> Self {
        GatingParams {
            alpha0: vec![0.0; components],
            alpha: DMatrix::zeros(components, p),
        }
    }

    pub fn components(&self) -> usize {
        self.alpha0.len()
    }

    /// Linear predictor `alpha_0c + x' alpha_c`.
    pub fn eta(&self, c: usize, x: &[f64]) -> f64 {
        self.alpha0[c]
            + x.iter()
                .zip(self.alpha.row(c).iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }
}

/// Expert parameters: slopes, `g_c` at the sample points, variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    #[serde(with = "crate::serde_rows")]
    pub beta: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    pub g_values: DMatrix<f64>,
    pub sigma2: Vec<f64>,
}

impl ExpertParams {
    pub fn components(&self) -> usize {
        self.sigma2.len()
    }

    /// Conditional mean of component `c` at observation `i`.
    pub fn mean(&self, data: &Dataset, c: usize, i: usize) -> f64 {
        let xb: f64 = (0..data.p()).map(|k| data.x[(i, k)] * self.beta[(c, k)]).sum();
        xb + self.g_values[(c, i)]
    }
}

/// Relabels components so that new component `k` is old component `perm[k]`.
///
/// The gating coefficients are re-referenced so the new last row is zero;
/// mixing probabilities are unchanged.
pub fn permute_components(
    gating: &GatingParams,
    experts: &ExpertParams,
    perm: &[usize],
) -> (GatingParams, ExpertParams) {
    let c = perm.len();
    let p = gating.alpha.ncols();
    let n = experts.g_values.ncols();
    let reference = perm[c - 1];
    let alpha0 = perm
        .iter()
        .map(|&k| gating.alpha0[k] - gating.alpha0[reference])
        .collect();
    let alpha = DMatrix::from_fn(c, p, |r, j| {
        gating.alpha[(perm[r], j)] - gating.alpha[(reference, j)]
    });
    let beta = DMatrix::from_fn(c, experts.beta.ncols(), |r, j| experts.beta[(perm[r], j)]);
    let g_values = DMatrix::from_fn(c, n, |r, j| experts.g_values[(perm[r], j)]);
    let sigma2 = perm.iter().map(|&k| experts.sigma2[k]).collect();
    (
        GatingParams { alpha0, alpha },
        ExpertParams {
            beta,
            g_values,
            sigma2,
        },
    )
}

/// Checks parameter shapes against the configuration and the structural
/// constraints (positive variances, zero reference row, FMPLR slopes).
pub fn validate_params(
    gating: &GatingParams,
    experts: &ExpertParams,
    cfg: &ModelConfig,
    p: usize,
) -> Result<()> {
    let c = cfg.components;
    let bad = |m: String| Err(MopleError::InvalidParams(m));
    if gating.alpha0.len() != c || gating.alpha.nrows() != c || gating.alpha.ncols() != p {
        return bad(format!(
            "gating shape ({}, {}x{}) does not match C={c}, p={p}",
            gating.alpha0.len(),
            gating.alpha.nrows(),
            gating.alpha.ncols()
        ));
    }
    if experts.sigma2.len() != c || experts.beta.nrows() != c || experts.beta.ncols() != p {
        return bad(format!("expert shape does not match C={c}, p={p}"));
    }
    if experts.g_values.nrows() != c {
        return bad(format!("g_values has {} rows, expected {c}", experts.g_values.nrows()));
    }
    if let Some(k) = experts.sigma2.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        return bad(format!(
            "nonpositive variance sigma2[{k}] = {}",
            experts.sigma2[k]
        ));
    }
    if experts.g_values.iter().any(|v| !v.is_finite())
        || experts.beta.iter().any(|v| !v.is_finite())
    {
        return bad("non-finite expert coefficients".into());
    }
    if gating.alpha0.iter().any(|v| !v.is_finite()) || gating.alpha.iter().any(|v| !v.is_finite())
    {
        return bad("non-finite gating coefficients".into());
    }
    if gating.alpha0[c - 1] != 0.0 || gating.alpha.row(c - 1).iter().any(|&v| v != 0.0) {
        return bad("nonzero reference gating row".into());
    }
    if cfg.variant == Variant::Fmplr {
        if gating.alpha.iter().any(|&v| v != 0.0) {
            return bad("nonzero gating slopes under FMPLR".into());
        }
        if cfg.fmplr_gating == FmplrGating::EqualProportions
            && gating.alpha0.iter().any(|&v| v != 0.0)
        {
            return bad("nonzero gating intercepts under equal-proportion FMPLR".into());
        }
    }
    Ok(())
}

/// Estimated `g_c` on an evenly spaced grid over the range of `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub grid: Vec<f64>,
    /// One row per component, one column per grid point.
    #[serde(with = "crate::serde_rows")]
    pub values: DMatrix<f64>,
    /// Grid points that had no kernel mass and took the value of the nearest
    /// feasible grid point.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Smallest observed `Q(after CM-step 2) - Q(before)` over all iterations.
    pub min_cm2_gain: f64,
    /// Iterations where the observed log-likelihood went down.
    pub nonmonotone_steps: usize,
    /// Variance updates clamped at the floor.
    pub variance_floor_hits: usize,
    /// Gating updates that kept the previous coefficients.
    pub gating_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub config: ModelConfig,
    pub n: usize,
    pub gating: GatingParams,
    pub experts: ExpertParams,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    /// n x C matrix of posterior membership probabilities.
    #[serde(with = "crate::serde_rows")]
    pub posteriors: DMatrix<f64>,
    /// MAP component per observation (0-based).
    pub labels: Vec<usize>,
    pub df: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    pub curves: CurveSet,
    pub diagnostics: FitDiagnostics,
}

/// MAP labels; the lowest component index wins exact ties.
pub fn map_labels(posteriors: &DMatrix<f64>) -> Vec<usize> {
    posteriors
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Shared validator for every fit produced by the crate.
pub fn validate_fit_result(fit: &FitResult) -> Result<()> {
    let bad = |m: String| Err(MopleError::InvalidParams(m));
    let c = fit.config.components;
    if fit.posteriors.nrows() != fit.n || fit.posteriors.ncols() != c {
        return bad("posterior matrix shape mismatch".into());
    }
    for (i, row) in fit.posteriors.row_iter().enumerate() {
        if row.iter().any(|&z| !(0.0..=1.0).contains(&z)) {
            return bad(format!("posterior row {i} has entries outside [0, 1]"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-10 {
            return bad(format!("posterior row {i} sums to {s}"));
        }
    }
    if fit.labels != map_labels(&fit.posteriors) {
        return bad("labels are not the MAP assignment".into());
    }
    if !fit.loglik.is_finite() || fit.loglik_trace.iter().any(|v| !v.is_finite()) {
        return bad("non-finite log-likelihood".into());
    }
    let expected = -2.0 * fit.loglik + (fit.n as f64).ln() * fit.df;
    if (fit.bic - expected).abs() > 1e-9 * (1.0 + expected.abs()) {
        return bad(format!("bic {} != -2 loglik + log(n) df = {expected}", fit.bic));
    }
    if fit.curves.values.iter().any(|v| !v.is_finite()) {
        return bad("non-finite curve values".into());
    }
    validate_params(&fit.gating, &fit.experts, &fit.config, fit.experts.beta.ncols())
}
