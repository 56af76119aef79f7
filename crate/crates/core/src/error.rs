use std::path::PathBuf;

/// Errors produced anywhere in the recognition pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} is invalid for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} is out of range for a vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error(
        "sequence of length {len} exceeds the maximum of {max} positions; \
         truncate the target text to at most {max_text} tokens"
    )]
    SequenceTooLong { len: usize, max: usize, max_text: usize },

    #[error("image error: {0}")]
    Image(String),

    #[error("cannot render characters {chars:?} with the embedded font")]
    Unrenderable { chars: String },

    #[error("target sequence must end with [EOS]")]
    MissingEos,

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("corrupt checkpoint manifest: {0}")]
    CorruptManifest(String),

    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error(
        "vocabulary hash mismatch: checkpoint was trained with vocab {expected}, \
         but the supplied vocab hashes to {found}"
    )]
    VocabMismatch { expected: String, found: String },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("malformed vocabulary file: {0}")]
    VocabFormat(String),

    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
