use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A construction parameter violates a documented constraint.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A query fell outside the range covered by a lookup table.
    #[error("out of range: {0}")]
    Range(String),

    /// Caller supplied inconsistent inputs (shapes, dimensions, bounds).
    #[error("invalid input: {0}")]
    Input(String),

    /// A factorization or evaluation produced an unusable result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Failed a structural invariant that the caller was responsible for.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("malformed {kind} data at byte {offset}: {msg}")]
    Format {
        kind: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("{path}: row {row}, column {column}: {msg}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        msg: String,
    },

    /// Dataset content that cannot be preprocessed.
    #[error("data error: {0}")]
    Data(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}
