use thiserror::Error;

/// Errors produced by the discretization, inference and diagnostic routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("nonpositive {field} value {value} in cell {cell}")]
    NonPositiveField {
        field: &'static str,
        cell: usize,
        value: f64,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("forward evaluation failed for sensitivity column {column}: {source}")]
    SensitivityColumn {
        column: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            found,
        })
    }
}
