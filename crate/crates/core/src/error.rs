use std::path::PathBuf;

/// Errors produced by the reconstruction backend.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid Sim(3) element: {0}")]
    InvalidSim3(String),

    #[error("log branch singularity: rotation angle is pi")]
    LogSingularity,

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("insufficient correspondences: {0}")]
    InsufficientCorrespondences(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("chunks {a} and {b} are not adjacent (no shared frames)")]
    NotAdjacent { a: usize, b: usize },

    #[error("alignment of chunks {from} -> {to} failed: {source}")]
    Alignment {
        from: usize,
        to: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing sequential edge {from} -> {to}")]
    MissingEdge { from: usize, to: usize },

    #[error("pose graph error: {0}")]
    Graph(String),

    #[error("residual of edge {from} -> {to}: {source}")]
    EdgeResidual {
        from: usize,
        to: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("chunk {index}: {source}")]
    Chunk {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("chunk residency limit {limit} reached; release a chunk before loading another")]
    Residency { limit: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed {kind} data: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }
}
