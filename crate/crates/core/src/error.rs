use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty mesh")]
    EmptyMesh,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("non-manifold edge ({0}, {1}) shared by {2} faces")]
    NonManifoldEdge(usize, usize, usize),
    #[error("topology mismatch at mesh {0}")]
    TopologyMismatch(usize),
    #[error("isolated vertex {0}")]
    IsolatedVertex(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid skeleton: {0}")]
    Skeleton(String),
    #[error("decimation failed: {0}")]
    Decimation(String),
    #[error("singular system: component containing vertex {0} has no anchor")]
    Singular(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
    },
    #[error("hash mismatch: {0}")]
    HashMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
