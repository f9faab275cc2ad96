use thiserror::Error;

use crate::tree::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("node {0} not found")]
    NotFound(String),

    #[error("structure error: {0}")]
    Structure(String),

    #[error("reference error: {0}")]
    Reference(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),

    #[error("no sample within {tol} s of t = {t}")]
    JoinTolerance { t: f64, tol: f64 },

    #[error("range error: {0}")]
    Range(String),

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("singular observation: landmark at sensor origin")]
    SingularObservation,

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("solver consistency error: {0}")]
    Consistency(String),

    #[error("processor not ready: {0}")]
    NotReady(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: missing or invalid key '{key}'{}", detail_suffix(.detail))]
    Config { key: String, detail: String },

    #[error("unknown {category} type '{name}'; available: [{}]", .available.join(", "))]
    UnknownType {
        category: String,
        name: String,
        available: Vec<String>,
    },

    #[error("binding error: {0}")]
    Binding(String),

    #[error("association error: {0}")]
    Association(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn detail_suffix(detail: &str) -> String {
    if detail.is_empty() {
        String::new()
    } else {
        format!(" ({detail})")
    }
}

impl Error {
    pub(crate) fn not_found(id: NodeId) -> Self {
        Error::NotFound(id.to_string())
    }

    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }
}
