use thiserror::Error;

pub type Result<T, E = MopleError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MopleError {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label length mismatch: {left} vs {right}")]
    LabelLengthMismatch { left: usize, right: usize },

    /// The responsibility-weighted kernel mass vanished at an evaluation point.
    #[error("bandwidth too small: component {component} has no kernel mass at u = {point}")]
    BandwidthInfeasible { component: usize, point: f64 },

    #[error("component {component} is empty (total responsibility {mass:e})")]
    DegenerateComponent { component: usize, mass: f64 },

    #[error("singular normal equations for component {component}")]
    ComponentCollapse { component: usize },

    #[error("singular gating Hessian block for component {component}")]
    SingularHessian { component: usize },

    #[error("all {restarts} initialization restarts failed (last error: {last})")]
    InitializationFailed { restarts: usize, last: String },

    #[error("every (C, h) candidate was infeasible")]
    AllCandidatesInfeasible,

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<MopleError>,
    },

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl MopleError {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ MopleError::AtIteration { .. } => e,
            e => MopleError::AtIteration {
                iteration,
                source: Box::new(e),
            },
        }
    }

    /// True for failures of the numerical procedure itself, as opposed to
    /// rejected inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            MopleError::BandwidthInfeasible { .. }
            | MopleError::DegenerateComponent { .. }
            | MopleError::ComponentCollapse { .. }
            | MopleError::SingularHessian { .. }
            | MopleError::InitializationFailed { .. }
            | MopleError::AllCandidatesInfeasible => true,
            MopleError::AtIteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            MopleError::InvalidData(_) => "invalid_data",
            MopleError::InvalidParams(_) => "invalid_params",
            MopleError::InvalidConfig(_) => "invalid_config",
            MopleError::LabelLengthMismatch { .. } => "label_length_mismatch",
            MopleError::BandwidthInfeasible { .. } => "bandwidth_infeasible",
            MopleError::DegenerateComponent { .. } => "degenerate_component",
            MopleError::ComponentCollapse { .. } => "component_collapse",
            MopleError::SingularHessian { .. } => "singular_hessian",
            MopleError::InitializationFailed { .. } => "initialization_failed",
            MopleError::AllCandidatesInfeasible => "all_candidates_infeasible",
            MopleError::AtIteration { source, .. } => source.kind(),
            MopleError::Io { .. } => "io",
            MopleError::Json(_) => "json",
        }
    }
}
