use thiserror::Error;

/// Errors surfaced by tensors, layers, training, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes for an operation. Names both shapes.
    #[error("dimension error in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    /// Spatial geometry cannot support the requested operation.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation contract was violated (e.g. non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// A metric is undefined for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Malformed file content; `offset` is the byte position of the problem.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Checkpoint failed its integrity check.
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    /// Checkpoint format version not supported by this build.
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    /// A stored parameter does not fit the constructed architecture.
    #[error("parameter '{name}': {detail}")]
    ParamMismatch { name: String, detail: String },

    /// Training produced a non-finite loss; the last good parameters are kept.
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Dimension {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
