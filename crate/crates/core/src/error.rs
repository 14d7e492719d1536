use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: sample '{sample_id}' is unreadable")]
    Truncated { sample_id: String },

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("invariant violation: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in sample '{0}'")]
    NonFinite(String),

    #[error("duplicate sample id '{0}'")]
    DuplicateId(String),

    #[error("unknown sample id '{0}'")]
    UnknownSample(String),

    #[error("layer not stored: {0}")]
    LayerNotStored(usize),

    #[error("position not stored: {0}")]
    PositionNotStored(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample '{sample_id}' has no {kind} label")]
    MissingLabel { sample_id: String, kind: String },

    #[error("label conflict: {0}")]
    LabelConflict(String),

    #[error("train/test overlap on sample '{0}'")]
    SplitOverlap(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("model file: {0}")]
    Model(String),

    #[error("command not found: {0}")]
    CommandNotFound(String),

    #[error("sandbox failure: {0}")]
    Sandbox(String),

    #[error("training diverged to non-finite values: {0}")]
    Diverged(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that happen while executing a valid request
    /// (sandbox setup, I/O on scratch space, divergence) rather than bad
    /// input.
    pub fn is_runtime(&self) -> bool {
        matches!(self, Error::Sandbox(_) | Error::Io(_) | Error::Diverged(_))
    }
}
