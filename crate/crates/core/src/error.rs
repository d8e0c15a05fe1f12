use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing required column `{column}`")]
    MissingColumn { column: String },
    #[error("schema error at row {row}: {msg}")]
    Schema { row: usize, msg: String },
    #[error("duplicate sample ids: {}", ids.join(", "))]
    DuplicateIds { ids: Vec<String> },
    #[error("unknown corpus `{name}` at row {row}")]
    UnknownCorpus { name: String, row: usize },
    #[error("sample `{sample_id}` has no patient_id (required by the patient protocol)")]
    MissingPatient { sample_id: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("infeasible fold construction: {0}")]
    Infeasible(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("t-SNE diverged at iteration {iteration}")]
    EmbeddingDivergence { iteration: usize },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("format error at row {row}: {msg}")]
    Format { row: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing bundle member {}", path.display())]
    MissingBundleMember { path: PathBuf },
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than a failing computation.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::MissingColumn { .. }
            | Error::Schema { .. }
            | Error::DuplicateIds { .. }
            | Error::UnknownCorpus { .. }
            | Error::MissingPatient { .. }
            | Error::Input(_)
            | Error::Infeasible(_)
            | Error::UndefinedMetric(_)
            | Error::Integrity(_)
            | Error::Format { .. }
            | Error::Config(_)
            | Error::MissingBundleMember { .. }
            | Error::Csv(_)
            | Error::Json(_) => true,
            Error::Fold { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}
