use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rotation angle {angle} rad is within 1e-6 of pi; logarithm is ill-conditioned")]
    AngleNearPi { angle: f64 },

    #[error("point cloud has zero spatial extent")]
    DegenerateCloud,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("non-finite coordinate at point {index}")]
    NonFinitePoint { index: usize },

    #[error("invalid sample count {requested} for a cloud of {available} points")]
    BadCount { requested: usize, available: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("cloud of {points} points exceeds the encoder capacity of {max}")]
    TooManyPoints { points: usize, max: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("normal equations are singular")]
    SingularNormalEquations,

    #[error("cross-covariance is rank deficient")]
    DegenerateCorrespondences,

    #[error("camera sees no mesh surface")]
    EmptyView,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
