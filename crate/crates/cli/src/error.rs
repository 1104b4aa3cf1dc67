use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] qbm_core::Error),

    /// A check ran to completion and did not meet its threshold.
    #[error("check failed: {0}")]
    CheckFailed(String),

    /// Too many grid nodes were excluded as degenerate.
    #[error("degenerate parameters: {0}")]
    TooDegenerate(String),
}

impl CliError {
    /// Process exit code: 1 validation, 2 numerical failure, 3 degenerate
    /// parameters.
    pub fn exit_code(&self) -> i32 {
        use qbm_core::Error as E;
        match self {
            Self::Config(_) | Self::Io { .. } => 1,
            Self::CheckFailed(_) => 2,
            Self::TooDegenerate(_) => 3,
            Self::Core(e) => match e {
                E::InvalidParameter { .. }
                | E::Domain { .. }
                | E::Extrapolation { .. }
                | E::Divergent(_)
                | E::GridMismatch(_)
                | E::Arity { .. } => 1,
                E::QuadratureTolerance { .. } | E::Singular { .. } | E::TrajectoryRejected { .. } => 2,
                E::Degenerate { .. } | E::MaskedInterval { .. } => 3,
            },
        }
    }
}
