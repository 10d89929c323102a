use std::path::PathBuf;

use editnet_core::TrainError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Malformed binary input. `offset` is the byte where parsing stopped.
    #[error("{what} at byte {offset}")]
    Format { what: String, offset: u64 },

    #[error("{file} line {line}: {what}")]
    Text {
        file: String,
        line: usize,
        what: String,
    },

    #[error("unsupported {what} version {found} (this build reads {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("checksum mismatch in section `{0}`")]
    Checksum(String),

    #[error("missing section `{0}`")]
    MissingSection(String),

    #[error(transparent)]
    Core(#[from] editnet_core::Error),

    #[error(transparent)]
    Train(#[from] TrainError),

    #[error("usage: {0}")]
    Usage(String),

    #[error("verification failed: {0}")]
    Verification(String),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn format(what: impl Into<String>, offset: u64) -> Self {
        Error::Format {
            what: what.into(),
            offset,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use editnet_core::Error as C;
        match self {
            Error::Usage(_) => EXIT_USAGE,
            Error::Verification(_) => EXIT_VERIFY,
            Error::Train(TrainError::Diverged { .. }) => EXIT_NUMERIC,
            Error::Core(C::NonFinite(_)) | Error::Train(TrainError::Invalid(C::NonFinite(_))) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}
