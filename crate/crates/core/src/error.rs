use thiserror::Error;

/// Errors raised by the selection, fitting and simulation routines.
#[derive(Debug, Error)]
pub enum FlarsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("degenerate response: {0}")]
    DegenerateResponse(String),

    #[error("no candidate variable is correlated with the response")]
    NoSignal,

    #[error("ill-posed smoothing problem: {0}")]
    IllPosed(String),

    #[error("hyperparameter optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown subject `{0}`; use predict_new_subject for unseen subjects")]
    UnknownSubject(String),

    #[error("unsupported file: {0}")]
    SchemaMismatch(String),

    #[error("too many failed replications: {failed} of {total}")]
    ReplicationFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FlarsError>;

pub(crate) fn invalid(msg: impl Into<String>) -> FlarsError {
    FlarsError::InvalidArgument(msg.into())
}
