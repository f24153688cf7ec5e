use std::path::{Path, PathBuf};

use fedml_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 config, 3 divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } => 4,
            Self::Core(e) => match e {
                CoreError::Diverged { .. } | CoreError::AscentDiverged => 3,
                CoreError::Io { .. } | CoreError::NotIdx(_) | CoreError::CorruptIdx(_) | CoreError::Json(_) => 4,
                _ => 2,
            },
        }
    }
}
