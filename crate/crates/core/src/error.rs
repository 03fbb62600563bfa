use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Sensor closer to the magnet center than the dipole model tolerates.
    #[error("sensor {sensor} is {distance:.3e} m from the magnet center (minimum 1e-6 m)")]
    DegenerateDistance { sensor: usize, distance: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("all {n_samples} sampled poses produced a degenerate Fisher information matrix")]
    AllDegenerate { n_samples: usize },

    #[error("Fisher information is singular at the requested pose")]
    DegeneratePose,

    #[error("normal equations are singular even after diagonal regularization")]
    SingularNormalEquations,

    #[error("need {needed} candidate sites but only {available} are available")]
    InsufficientCandidates { needed: usize, available: usize },

    #[error("sensor {sensor} is {distance:.3e} m off the shell surface")]
    OffShell { sensor: usize, distance: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
