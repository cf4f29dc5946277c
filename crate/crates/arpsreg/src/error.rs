use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid membership matrix: {0}")]
    InvalidMembership(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("overlap constraint unattainable after {retries} retries (best {best:.3}, wanted {wanted:.3})")]
    OverlapUnattainable {
        retries: usize,
        best: f64,
        wanted: f64,
    },
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("missing checkpoint for learned method {0}")]
    MissingCheckpoint(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (pairs {pair_ids:?}): {detail}")]
    NanLoss {
        epoch: usize,
        batch: usize,
        pair_ids: Vec<usize>,
        detail: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] arpsreg_nn::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
