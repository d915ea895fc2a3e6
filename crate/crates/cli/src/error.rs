use std::path::PathBuf;

use thiserror::Error;

/// A failure inside one pipeline stage.
#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {kind}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub kind: Failure,
}

#[derive(Debug, Error)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] fracbayes_core::Error),

    #[error("missing prerequisite {file} in {dir}; run `fracbayes {needs}` first")]
    Missing {
        file: String,
        dir: PathBuf,
        needs: &'static str,
    },

    #[error("{file} in {dir} was produced from a different configuration; rerun `fracbayes {needs}`")]
    Stale {
        file: String,
        dir: PathBuf,
        needs: &'static str,
    },

    #[error("{file} does not match the hash recorded in the manifest; rerun `fracbayes {needs}`")]
    Modified { file: String, needs: &'static str },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("malformed {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("thread pool: {0}")]
    Threads(String),
}

pub type StageResult<T> = std::result::Result<T, Failure>;

pub trait InStage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T, E: Into<Failure>> InStage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|e| StageError { stage, kind: e.into() })
    }
}
