use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid demand matrix: {0}")]
    Demand(String),

    #[error("invalid sequence spec: {0}")]
    Spec(String),

    #[error("invalid strategy: {0}")]
    Strategy(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("singular flow system for destination {dest}: strategy does not absorb all traffic")]
    SingularFlow { dest: usize },

    #[error("LP {0}")]
    Lp(#[from] crate::lp::LpError),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
