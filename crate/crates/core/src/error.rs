use thiserror::Error;

/// Errors raised by the library. Numerical non-convergence of the relocation
/// solver is not an error; it is reported on the solution itself.
#[derive(Debug, Error)]
pub enum SpoError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("matrix {matrix} is not positive definite")]
    NotPositiveDefinite { matrix: &'static str },

    #[error("non-finite entry in {what}")]
    NonFinite { what: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Parse { what: String, message: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<SpoError>,
    },
}

pub type Result<T> = std::result::Result<T, SpoError>;

/// Attaches a stage name to the error of a result.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}

impl SpoError {
    /// Wraps the error with the run stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        SpoError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 4 for I/O, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            SpoError::Io { .. } => 4,
            SpoError::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SpoError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        SpoError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(SpoError::Dimension {
            what,
            expected,
            actual,
        })
    }
}
