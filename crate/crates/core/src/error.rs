use thiserror::Error;

pub type Result<T, E = DipError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DipError {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("degenerate triplet batch: anchor {anchor} has no {missing}")]
    DegenerateBatch { anchor: usize, missing: &'static str },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("affine transform is singular")]
    SingularTransform,

    #[error("query {query} has no valid gallery match")]
    NoValidMatch { query: usize },

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint corrupted: {0}")]
    Corrupted(String),

    #[error("checkpoint does not match the requested configuration: {0}")]
    ConfigMismatch(String),

    #[error("training diverged at epoch {epoch}: total loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DipError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DipError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn parse(what: &'static str, detail: impl Into<String>) -> Self {
        DipError::Parse { what, detail: detail.into() }
    }
}
