//! Mixtures of partially linear experts.
//!
//! Fits the mixture of partially linear experts (MoPLE) together with two
//! nested baselines, the mixture of linear experts (MoE) and the finite
//! mixture of partially linear regressions (FMPLR). Estimation is an ECM
//! loop whose nonparametric parts are kernel-smoothed profile updates.
//! Model selection uses a BIC with kernel-adjusted degrees of freedom.
//!
//! The [`simulation`] and [`metrics`] modules reproduce the Monte Carlo
//! evaluation protocol (coefficient bias/MSE, curve MAE, ARI, AMI).

pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod gating;
pub mod kernel;
pub mod metrics;
pub mod rng;
pub mod selection;
pub mod simulation;

mod linalg;
mod serde_rows;

pub use data::{
    load_dataset, validate_fit_result, validate_params, ColumnSchema, Dataset, ExpertParams,
    FitResult, FmplrGating, GatingParams, ModelConfig, MoeExpert, Variant,
};
pub use engine::{fit, initialize, EcmState};
pub use error::{MopleError, Result};
pub use kernel::{KernelKind, KernelSpec};
pub use selection::{select, SelectionGrid};
