use std::path::PathBuf;

/// Every failure surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("token id {id} is out of vocabulary (size {vocab})")]
    OutOfVocabulary { id: usize, vocab: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("prefix `{0}` matches no parameter")]
    UnknownModule(String),

    #[error("non-finite value produced by primitive `{primitive}` at node {node}")]
    NonFinite { primitive: &'static str, node: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("corrupt corpus record {id}: {reason}")]
    CorruptCorpus { id: String, reason: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint provenance: {0}")]
    Provenance(String),

    #[error("content mismatch: {0}")]
    ContentMismatch(String),

    #[error("emotion probe unfit: validation accuracy {0:.3} is below 0.95")]
    ProbeUnfit(f64),

    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 2 usage, 3 I/O or file format, 4 contract
    /// violation, 5 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. }
            | Error::Json(_)
            | Error::CorruptCorpus { .. }
            | Error::CorruptCheckpoint(_)
            | Error::Version { .. } => 3,
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => 5,
            Error::InvalidShape(_)
            | Error::EmptyInput(_)
            | Error::OutOfVocabulary { .. }
            | Error::Contract(_)
            | Error::UnknownModule(_)
            | Error::Provenance(_)
            | Error::ContentMismatch(_)
            | Error::ProbeUnfit(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
