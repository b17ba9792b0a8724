use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The variants map onto the CLI's exit-code classes through [`Error::is_user_error`].
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor shape did not line up; `axis` names the offending dimension.
    #[error("dimension error in {op}: axis {axis} expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("corrupt data in {path} at byte offset {offset}: {reason}")]
    CorruptData {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {term} is not finite")]
    NonFinite {
        epoch: usize,
        step: usize,
        term: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable class name used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Topology(_) => "topology",
            Error::Data(_) => "data",
            Error::CorruptData { .. } => "corrupt-data",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non-finite",
            Error::Io { .. } => "io",
        }
    }

    /// True for errors caused by inputs the user controls (bad config, bad files).
    /// Everything else indicates a bug or a numerical failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Usage(_)
                | Error::Topology(_)
                | Error::Data(_)
                | Error::CorruptData { .. }
                | Error::Checkpoint(_)
                | Error::Io { .. }
        )
    }
}
