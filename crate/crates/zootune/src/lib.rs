//! File formats and the command-line driver around `zootune-core`.

pub mod atomic;
pub mod cli;
pub mod config;
pub mod csvio;
pub mod error;
pub mod idx;
pub mod zooc;

pub use error::{Error, Result};
