use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated input: need {needed} bytes at offset {offset}, only {available} available")]
    Length { offset: usize, needed: usize, available: usize },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] zootune_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use zootune_core::Error as C;
        match self {
            Error::Usage(_) | Error::Core(C::Config(_) | C::Spec(_)) => EXIT_USAGE,
            Error::Core(C::Diverged { .. }) => EXIT_TRAINING,
            _ => EXIT_DATA,
        }
    }
}
