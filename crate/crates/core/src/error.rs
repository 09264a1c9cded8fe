use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and a parameter) disagree along one axis.
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    /// A dataset file did not follow its binary layout.
    #[error("{}: byte offset {offset}: {message}", path.display())]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("checkpoint: bad magic {found:?}, expected \"SEXP\"")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint: unsupported version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checkpoint: truncated in {section} at byte offset {offset}")]
    Truncated { section: String, offset: u64 },

    #[error("checkpoint: {0}")]
    Corrupt(String),

    #[error("model has no squeeze-and-excitation block")]
    NoSeBlock,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            message: message.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            op,
            axis,
            expected,
            actual,
        }
    }

    /// True for errors caused by malformed input files rather than bad arguments.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::BadMagic { .. }
                | Error::UnsupportedVersion { .. }
                | Error::Truncated { .. }
                | Error::Corrupt(_)
                | Error::EmptyDataset(_)
                | Error::Io(_)
        )
    }
}
