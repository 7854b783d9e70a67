//! Standard-library companion to `softsort-core`: the timed sort-yourself
//! benchmark, the property suite, config files and CSV/JSON output used by
//! the `softsort` binary.

pub mod bench;
pub mod config;
pub mod properties;

pub use softsort_core as core;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] softsort_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
