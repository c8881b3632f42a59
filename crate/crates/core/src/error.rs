use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    /// Every sample weight in the relevant subgroup is zero.
    #[error("empty subgroup: {0}")]
    EmptySubgroup(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    /// Logistic fit received labels from a single class.
    #[error("separation error: {0}")]
    Separation(String),

    #[error("fold {fold}: {message}")]
    Fold { fold: usize, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("stratum error: {0}")]
    Stratum(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
