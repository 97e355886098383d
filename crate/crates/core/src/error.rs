use thiserror::Error;

/// Errors shared across the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{0}: non-finite value encountered")]
    NonFinite(&'static str),

    #[error("value does not belong to this graph")]
    WrongGraph,

    #[error("value is attached to another graph; detach before reuse")]
    ForeignGraph,

    #[error("empty bag")]
    EmptyBag,

    #[error("no foreground tiles after filtering")]
    NoForeground,

    #[error("gradients missing: {0}")]
    MissingGradients(&'static str),

    #[error("AUC undefined: both classes must be present")]
    SingleClassAuc,

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
