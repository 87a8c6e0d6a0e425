use thiserror::Error;

/// Errors produced by simulation, fitting and file handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient points: requested {requested}, cloud has {available}")]
    InsufficientPoints { requested: usize, available: usize },

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("non-finite coordinate at point {0}")]
    NonFinitePoint(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no contact detected between controller and object")]
    NoContact,

    #[error("simulation diverged at substep {substep} (frame {frame})")]
    Diverged { frame: usize, substep: usize },

    #[error("non-finite gradient for spring {0}")]
    NonFiniteGradient(usize),

    #[error("non-finite controller gradient at frame {frame}, node {node}")]
    NonFiniteControllerGradient { frame: usize, node: usize },

    #[error("all candidates diverged; tried: {0}")]
    AllCandidatesFailed(String),

    #[error("frame count mismatch: expected {expected}, found {found}")]
    FrameMismatch { expected: usize, found: usize },

    #[error("scene spec unstable: {0}")]
    SceneUnstable(String),

    #[error("deforming set is empty")]
    EmptyDeformingSet,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported schema: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InsufficientPoints { .. } => "insufficient_points",
            Error::EmptyCloud => "empty_cloud",
            Error::NonFinitePoint(_) => "non_finite_point",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NoContact => "no_contact",
            Error::Diverged { .. } => "diverged",
            Error::NonFiniteGradient(_) | Error::NonFiniteControllerGradient { .. } => {
                "non_finite_gradient"
            }
            Error::AllCandidatesFailed(_) => "all_candidates_failed",
            Error::FrameMismatch { .. } => "frame_mismatch",
            Error::SceneUnstable(_) => "scene_unstable",
            Error::EmptyDeformingSet => "empty_deforming_set",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
