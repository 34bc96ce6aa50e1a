use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: io::Error },

    #[error("cannot create {}: {source}", path.display())]
    Write { path: PathBuf, source: io::Error },

    #[error("config key `{key}`{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { key: String, line: Option<usize>, message: String },

    #[error(transparent)]
    Core(#[from] gevolab_core::Error),
}
