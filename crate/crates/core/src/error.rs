use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {source}")]
    Json {
        what: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("slot index {index} out of range (bundle has {len} slots)")]
    SlotOutOfRange { index: usize, len: usize },

    #[error("unknown slot name `{0}`")]
    UnknownSlot(String),

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("mask {path} has label {value} at pixel ({x}, {y}) but the schema has {num_classes} classes")]
    MaskLabel {
        path: PathBuf,
        x: u32,
        y: u32,
        value: u8,
        num_classes: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(what: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            what: what.into(),
            source,
        }
    }
}
