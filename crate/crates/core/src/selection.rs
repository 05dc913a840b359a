//! BIC with kernel-adjusted degrees of freedom, bandwidth grids and the
//! `(C, h)` grid search.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FitResult, FmplrGating, ModelConfig, MoeExpert, Variant};
use crate::engine::{fit, initialize_seeded, EcmState};
use crate::error::{MopleError, Result};
use crate::kernel::kernel_constants;
use crate::rng::derive_seed;

/// Effective number of parameters.
///
/// Kernel variants add `C tau_K |Omega| / h (K(0) - 1/2 int K^2)` to the
/// parametric count `(2C-1)(p+1)`; FMPLR drops the gating slopes. The MoE
/// variant counts every parametric coefficient once.
pub fn effective_df(cfg: &ModelConfig, data: &Dataset) -> f64 {
    let c = cfg.components as f64;
    let p = data.p() as f64;
    let parametric = (2.0 * c - 1.0) * (p + 1.0);
    match cfg.variant {
        Variant::Moe => {
            let per_component = match cfg.moe_expert {
                MoeExpert::Intercept => 1.0,
                MoeExpert::LinearInU => 2.0,
            };
            parametric + per_component * c
        }
        Variant::Mople | Variant::Fmplr => {
            let k = kernel_constants(cfg.kernel);
            let nonparametric = c * k.tau_k * data.u_range() / cfg.bandwidth * k.df_factor();
            let dropped = match (cfg.variant, cfg.fmplr_gating) {
                (Variant::Mople, _) => 0.0,
                (_, FmplrGating::FreeIntercepts) => (c - 1.0) * p,
                (_, FmplrGating::EqualProportions) => (c - 1.0) * (p + 1.0),
            };
            nonparametric + parametric - dropped
        }
    }
}

/// `-2 loglik + ln(n) df`.
pub fn bic(loglik: f64, df: f64, n: usize) -> f64 {
    -2.0 * loglik + (n as f64).ln() * df
}

pub const DEFAULT_GRID_POINTS: usize = 10;
pub const DEFAULT_GRID_LO: f64 = 0.06;
pub const DEFAULT_GRID_HI: f64 = 0.5;

/// Log-spaced bandwidths from `0.06 |Omega|` to `0.5 |Omega|`.
pub fn default_bandwidth_grid(data: &Dataset) -> Vec<f64> {
    log_grid(
        DEFAULT_GRID_LO * data.u_range(),
        DEFAULT_GRID_HI * data.u_range(),
        DEFAULT_GRID_POINTS,
    )
}

pub fn log_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..k)
                .map(|i| {
                    if i == k - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (k - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCell {
    pub components: usize,
    pub bandwidth: f64,
    pub status: CellStatus,
    pub loglik: Option<f64>,
    pub df: f64,
    pub bic: Option<f64>,
    /// Smallest CM-step gain in the expected complete-data log-likelihood.
    pub min_cm2_gain: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionGrid {
    pub component_counts: Vec<usize>,
    pub bandwidths: Vec<f64>,
    /// Row-major over `component_counts` then `bandwidths`.
    pub cells: Vec<SelectionCell>,
    pub chosen: usize,
}

impl SelectionGrid {
    pub fn chosen_cell(&self) -> &SelectionCell {
        &self.cells[self.chosen]
    }

    pub fn cell(&self, components: usize, bandwidth: f64) -> Option<&SelectionCell> {
        self.cells
            .iter()
            .find(|c| c.components == components && c.bandwidth == bandwidth)
    }

    /// CSV with columns `C,h,loglik,df,bic,status`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| MopleError::Io {
            path: "selection grid".into(),
            message: e.to_string(),
        };
        w.write_record(["C", "h", "loglik", "df", "bic", "status"]).map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            let status = match c.status {
                CellStatus::Ok => "ok",
                CellStatus::Infeasible => "infeasible",
            };
            w.write_record([
                c.components.to_string(),
                c.bandwidth.to_string(),
                opt(c.loglik),
                c.df.to_string(),
                opt(c.bic),
                status.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| MopleError::Io {
            path: "selection grid".into(),
            message: e.to_string(),
        })
    }
}

/// Index of the minimum-BIC ok cell; ties go to smaller `C`, then larger `h`.
fn argmin_cell(cells: &[SelectionCell]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, c) in cells.iter().enumerate() {
        let Some(b) = c.bic else { continue };
        let better = match best {
            None => true,
            Some(j) => {
                let o = &cells[j];
                let ob = o.bic.expect("ok cell");
                b < ob
                    || (b == ob
                        && (c.components < o.components
                            || (c.components == o.components && c.bandwidth > o.bandwidth)))
            }
        };
        if better {
            best = Some(k);
        }
    }
    best
}

fn cell_config(template: &ModelConfig, components: usize, bandwidth: f64, seed: u64) -> ModelConfig {
    ModelConfig {
        components,
        bandwidth,
        seed,
        ..template.clone()
    }
}

/// Seed of the initialization shared by every cell with `components`
/// components; [`fit_with_restarts`](crate::engine::fit_with_restarts) uses
/// the same derivation.
pub fn component_seed(seed: u64, components: usize) -> u64 {
    derive_seed(seed, &[components as u64])
}

/// Fits every `(C, h)` cell and returns the minimum-BIC configuration, the
/// full grid, and the chosen fit.
///
/// Each `C` is initialized once and that start is shared by all of its
/// bandwidths. The MoE variant ignores `h`, so it is fitted once per `C`.
/// Cells that fail numerically are marked infeasible and excluded.
pub fn select(
    data: &Dataset,
    template: &ModelConfig,
    component_counts: &[usize],
    bandwidths: &[f64],
    seed: u64,
) -> Result<(ModelConfig, SelectionGrid, FitResult)> {
    if component_counts.is_empty() || bandwidths.is_empty() {
        return Err(MopleError::InvalidConfig(
            "selection needs at least one component count and one bandwidth".into(),
        ));
    }
    for &c in component_counts {
        cell_config(template, c, bandwidths[0], seed).validate()?;
    }
    for &h in bandwidths {
        cell_config(template, component_counts[0], h, seed).validate()?;
    }

    let inits: Vec<Result<EcmState>> = component_counts
        .par_iter()
        .map(|&c| {
            initialize_seeded(
                data,
                &cell_config(template, c, bandwidths[0], seed),
                component_seed(seed, c),
            )
        })
        .collect();

    let kernel = template.variant.uses_kernel();
    let tasks: Vec<(usize, usize)> = (0..component_counts.len())
        .flat_map(|i| {
            let hs = if kernel { bandwidths.len() } else { 1 };
            (0..hs).map(move |j| (i, j))
        })
        .collect();
    let fits: Vec<((usize, usize), Result<FitResult>)> = tasks
        .par_iter()
        .map(|&(i, j)| {
            let c = component_counts[i];
            let cfg = cell_config(template, c, bandwidths[j], seed);
            let r = match &inits[i] {
                Ok(init) => fit(data, &cfg, init),
                Err(e) => Err(MopleError::InitializationFailed {
                    restarts: cfg.restarts,
                    last: e.to_string(),
                }),
            };
            ((i, j), r)
        })
        .collect();

    let mut results: Vec<Option<FitResult>> = Vec::new();
    let mut cells = Vec::new();
    for (i, &c) in component_counts.iter().enumerate() {
        for (j, &h) in bandwidths.iter().enumerate() {
            let cfg = cell_config(template, c, h, seed);
            let df = crate::selection::effective_df(&cfg, data);
            let key = if kernel { (i, j) } else { (i, 0) };
            let (_, r) = fits.iter().find(|(k, _)| *k == key).expect("every cell fitted");
            match r {
                Ok(f) => {
                    let mut f = f.clone();
                    f.config = cfg;
                    f.df = df;
                    f.bic = bic(f.loglik, df, data.n());
                    cells.push(SelectionCell {
                        components: c,
                        bandwidth: h,
                        status: CellStatus::Ok,
                        loglik: Some(f.loglik),
                        df,
                        bic: Some(f.bic),
                        min_cm2_gain: Some(f.diagnostics.min_cm2_gain),
                        error: None,
                    });
                    results.push(Some(f));
                }
                Err(e) if e.is_numerical() => {
                    log::info!("cell C={c}, h={h} infeasible: {e}");
                    cells.push(SelectionCell {
                        components: c,
                        bandwidth: h,
                        status: CellStatus::Infeasible,
                        loglik: None,
                        df,
                        bic: None,
                        min_cm2_gain: None,
                        error: Some(e.to_string()),
                    });
                    results.push(None);
                }
                Err(e) => {
                    return Err(MopleError::InvalidConfig(format!(
                        "cell C={c}, h={h}: {e}"
                    )))
                }
            }
        }
    }
    let chosen = argmin_cell(&cells).ok_or(MopleError::AllCandidatesInfeasible)?;
    let best = results.swap_remove(chosen).expect("chosen cell is ok");
    let grid = SelectionGrid {
        component_counts: component_counts.to_vec(),
        bandwidths: bandwidths.to_vec(),
        cells,
        chosen,
    };
    Ok((best.config.clone(), grid, best))
}
