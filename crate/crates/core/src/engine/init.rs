//! Multi-start initialization from random soft assignments.

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use super::{e_step_with_loglik, run_ecm, EcmState, ExpertSmoother, Start};
use crate::data::{Dataset, ModelConfig, MoeExpert, Variant};
use crate::error::{MopleError, Result};
use crate::gating::GatingMode;
use crate::rng::{derive_seed, TaskRng};

pub const RESTART_MAX_ITER: usize = 50;
pub const RESTART_TOL: f64 = 1e-4;

/// Rows drawn from a flat Dirichlet distribution.
fn random_posteriors<R: Rng + ?Sized>(n: usize, c: usize, rng: &mut R) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, c);
    for i in 0..n {
        let mut total = 0.0;
        for k in 0..c {
            let e: f64 = Exp1.sample(rng);
            z[(i, k)] = e;
            total += e;
        }
        for k in 0..c {
            z[(i, k)] /= total;
        }
    }
    z
}

fn restart_smoother(cfg: &ModelConfig) -> ExpertSmoother {
    match cfg.variant {
        Variant::Moe => ExpertSmoother::parametric(cfg.moe_expert),
        Variant::Mople | Variant::Fmplr => ExpertSmoother::parametric(MoeExpert::Intercept),
    }
}

fn one_restart(data: &Dataset, cfg: &ModelConfig, seed: u64) -> Result<EcmState> {
    let mut rng = <TaskRng as rand::SeedableRng>::seed_from_u64(seed);
    let z = random_posteriors(data.n(), cfg.components, &mut rng);
    let run = run_ecm(
        data,
        &restart_smoother(cfg),
        GatingMode::for_config(cfg),
        Start::Posteriors(z),
        RESTART_MAX_ITER,
        RESTART_TOL,
    )?;
    if run.diagnostics.variance_floor_hits > 0 {
        return Err(MopleError::DegenerateComponent {
            component: 0,
            mass: 0.0,
        });
    }
    Ok(run.state)
}

/// Runs `cfg.restarts` short mixture-of-linear-experts fits from random
/// soft assignments and keeps the one with the highest log-likelihood.
///
/// The returned `g_values` hold each component's fitted intercept broadcast
/// over every `u_j` (or the fitted line in `u` for the MoE form with `u` in
/// the experts).
pub fn initialize(data: &Dataset, cfg: &ModelConfig, rng: &mut dyn RngCore) -> Result<EcmState> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.restarts).map(|_| rng.next_u64()).collect();
    let results: Vec<Result<EcmState>> = seeds
        .par_iter()
        .map(|&s| one_restart(data, cfg, s))
        .collect();
    let mut best: Option<EcmState> = None;
    let mut last_err = None;
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(state) => {
                log::debug!("restart {k}: loglik {}", state.loglik);
                if best.as_ref().is_none_or(|b| state.loglik > b.loglik) {
                    best = Some(state);
                }
            }
            Err(e) => {
                log::debug!("restart {k} degenerate: {e}");
                last_err = Some(e);
            }
        }
    }
    let mut state = best.ok_or_else(|| MopleError::InitializationFailed {
        restarts: cfg.restarts,
        last: last_err.map(|e| e.to_string()).unwrap_or_default(),
    })?;
    // start counting iterations afresh for the main fit
    state.iter = 0;
    let (z, ll) = e_step_with_loglik(data, &state.gating, &state.experts);
    state.posteriors = z;
    state.loglik = ll;
    Ok(state)
}

/// [`initialize`] with a generator seeded from `seed`.
pub fn initialize_seeded(data: &Dataset, cfg: &ModelConfig, seed: u64) -> Result<EcmState> {
    let mut rng = <TaskRng as rand::SeedableRng>::seed_from_u64(derive_seed(seed, &[0x1a17]));
    initialize(data, cfg, &mut rng)
}

