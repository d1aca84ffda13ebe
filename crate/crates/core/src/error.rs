use thiserror::Error;

/// Errors produced anywhere in the defense toolkit.
#[derive(Debug, Error)]
pub enum AcatError {
    /// Shapes, indices or parameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric argument outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation called in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    /// Malformed binary or text file.
    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Training { epoch: usize, loss: f64 },

    #[error("attack error: {0}")]
    Attack(String),

    #[error("placement error: {0}")]
    Placement(String),

    /// A mask whose adversarial or clean region is empty where both are required.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    /// Input data that violates a schema or a label range.
    #[error("data error: {0}")]
    Data(String),

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<AcatError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl AcatError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        AcatError::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        AcatError::Format {
            offset,
            reason: reason.into(),
        }
    }

    /// True for errors caused by user input (bad config, bad flags, bad data
    /// layout) rather than failures while running.
    pub fn is_config_error(&self) -> bool {
        match self {
            AcatError::Config(_) | AcatError::Data(_) => true,
            AcatError::Frame { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, AcatError>;
