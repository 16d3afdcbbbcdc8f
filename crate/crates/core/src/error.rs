use thiserror::Error;

use crate::numcore::NumError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} has zero spread in the training split; increase n_train")]
    DegenerateStatistic { what: String },

    #[error("model/weights mismatch: {0}")]
    ModelMismatch(String),

    #[error("malformed {kind}: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("reference field has zero norm")]
    ZeroReference,

    #[error("sensitivity vector is identically zero (model locally constant)")]
    ZeroSensitivity,

    #[error("{0}")]
    InvalidInput(String),

    #[error("model evaluation produced non-finite output")]
    NonFinite,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
