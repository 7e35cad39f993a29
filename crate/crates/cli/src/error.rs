use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("{path}: manifest mismatch: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] nrsfm_uq::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Process exit codes, one per error class.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const IO: u8 = 2;
    pub const PARSE: u8 = 3;
    pub const MANIFEST: u8 = 4;
    pub const SPEC: u8 = 5;
    pub const DIMENSION: u8 = 6;
    pub const NUMERICAL: u8 = 7;
}

fn core_code(e: &nrsfm_uq::Error) -> u8 {
    use nrsfm_uq::Error as E;
    match e {
        E::Spec(_) | E::Coverage { .. } => exit::SPEC,
        E::Dimension(_) => exit::DIMENSION,
        E::Numerical(_) | E::DegenerateAlignment | E::DegenerateSample(_) => exit::NUMERICAL,
        E::Trial { source, .. } => core_code(source),
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => exit::IO,
            CliError::Parse { .. } => exit::PARSE,
            CliError::Manifest { .. } => exit::MANIFEST,
            CliError::Config(_) => exit::SPEC,
            CliError::Core(e) => core_code(e),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn manifest(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Manifest {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}
