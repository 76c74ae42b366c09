use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },

    #[error("invalid shape {dims:?}: every dimension must be >= 1 and rank must be 1..=4")]
    InvalidShape { dims: Vec<usize> },

    #[error("invalid axis {axis} for shape {shape}")]
    InvalidAxis { axis: usize, shape: Shape },

    #[error("log of non-positive value {value} at index {index}")]
    LogDomain { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("channel mismatch: input has {input} channels, layer expects {expected}")]
    ChannelMismatch { input: usize, expected: usize },

    #[error("node `{node}`: {source}")]
    Node {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("backward called before forward{}", .0.as_deref().map(|n| format!(" for node `{n}`")).unwrap_or_default())]
    BackwardBeforeForward(Option<String>),

    #[error("node `{node}` produced a non-finite value")]
    NonFinite { node: String },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NumericAbort { epoch: usize, batch: usize },

    #[error("weight file: bad magic bytes")]
    BadMagic,

    #[error("weight file: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("weight file: truncated")]
    Truncated,

    #[error("weight file: checksum mismatch")]
    ChecksumMismatch,

    #[error("weight file: tensor `{id}` has shape {found}, model expects {expected}")]
    WeightShapeMismatch {
        id: String,
        expected: Shape,
        found: Shape,
    },

    #[error("weight file: tensor `{0}` missing")]
    MissingTensor(String),

    #[error("weight file: unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("ppm: malformed header: {0}")]
    PpmHeader(String),

    #[error("ppm: truncated payload (expected {expected} bytes, found {found})")]
    PpmTruncated { expected: usize, found: usize },

    #[error("ppm: unsupported maxval {0} (only 255 is supported)")]
    PpmMaxval(u32),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn at_node(self, node: &str) -> Error {
        match self {
            e @ Error::Node { .. } => e,
            e => Error::Node {
                node: node.to_string(),
                source: Box::new(e),
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Error {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through node and file context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Node { source, .. } | Error::File { source, .. } => source.root(),
            e => e,
        }
    }
}
