use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{0} contains no triples")]
    EmptyGraph(PathBuf),

    #[error("inverse relation name `{0}` collides with an existing relation")]
    InverseNameCollision(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("path sampling gave up after {attempts} walks with {got} of {wanted} samples")]
    SamplingExhausted {
        wanted: usize,
        got: usize,
        attempts: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Box<crate::model::ModelParams>,
    },

    #[error("unknown {kind} `{name}`")]
    UnknownSymbol { kind: &'static str, name: String },

    #[error("saturation does not terminate: {0}")]
    NonTerminating(String),

    #[error("bad snapshot: {0}")]
    Snapshot(String),
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
