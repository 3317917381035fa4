use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes are inconsistent with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of range or a config key is unknown.
    #[error("config error: {0}")]
    Config(String),

    /// An input violates an operation's precondition (e.g. labels not one-hot).
    #[error("input error: {0}")]
    Input(String),

    /// A numeric contract was violated (non-finite values where finiteness is required).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was called in the wrong order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// Batch-norm training statistics are degenerate (one element per channel).
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// The on-disk dataset does not follow the expected folder layout.
    #[error("dataset layout error: {0}")]
    Layout(String),

    /// A checkpoint could not be read back (bad magic, version, or shapes).
    #[error("checkpoint load error: {0}")]
    Load(String),

    /// Training produced a non-finite loss; the model is restored to the last
    /// finite snapshot before this is returned.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
