use std::fmt;

/// Errors produced by the library.
///
/// The variants map onto the CLI exit codes: `Validation`, `Degenerate` and
/// `NonFinite` are input problems (exit 1); `Parse` and `Io` are file problems
/// (exit 2).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(msg: impl fmt::Display) -> Self {
        Error::Validation(msg.to_string())
    }

    pub(crate) fn degenerate(msg: impl fmt::Display) -> Self {
        Error::Degenerate(msg.to_string())
    }

    pub(crate) fn parse(line: usize, reason: impl fmt::Display) -> Self {
        Error::Parse {
            line,
            reason: reason.to_string(),
        }
    }

    /// True for errors caused by unreadable or malformed files.
    pub fn is_input_file_error(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Io { .. })
    }
}

/// Checks that two dimensions agree, naming the dimension on mismatch.
pub(crate) fn expect_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Validation(format!(
            "{what} mismatch: expected {expected}, got {got}"
        )));
    }
    Ok(())
}
