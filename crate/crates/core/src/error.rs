use thiserror::Error;

/// Errors raised by the fusion library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, lengths, symmetry).
    #[error("contract violation in {op}: {detail}")]
    ContractViolation { op: &'static str, detail: String },

    /// The input is numerically degenerate (rank deficiency, collapsed tokens).
    #[error("degenerate input to {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    /// A requested missing rate exceeds what the protocol allows.
    #[error("missing rate {requested} exceeds the protocol bound {bound}")]
    ProtocolBound { requested: f64, bound: f64 },

    /// A forward or backward intermediate became NaN or infinite.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status for the command-line tool: 2 for configuration
    /// problems, 3 for numerical divergence, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::ProtocolBound { .. } => 2,
            Error::Divergence { .. } | Error::NonFinite { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ContractViolation {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DegenerateInput {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
