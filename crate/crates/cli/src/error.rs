use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("cannot parse `{value}` for config key `{key}`")]
    Value { key: String, value: String },
    #[error("expected `key = value` (line {line}): `{text}`")]
    Syntax { line: usize, text: String },
    #[error("conflicting settings: {0}")]
    Conflict(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("{what} written to {} did not read back identically", path.display())]
    Validation { what: &'static str, path: PathBuf },
    #[error("gradient check failed: max relative error {max_rel_err:.3e} > {tol:.1e}")]
    GradCheck { max_rel_err: f64, tol: f64 },
    #[error(transparent)]
    Core(#[from] diffgap::Error),
}

impl From<diffgap::format::FormatError> for CliError {
    fn from(e: diffgap::format::FormatError) -> Self {
        Self::Core(e.into())
    }
}
