use thiserror::Error;

/// Errors raised anywhere in the fusion / few-shot pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("precondition violated in {op}: {msg}")]
    Precondition { op: &'static str, msg: String },

    #[error("{0} is not implemented")]
    NotImplemented(&'static str),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("support class {class} has no boxes")]
    MissingSupport { class: u32 },

    #[error("class {class} has {available} instances, {required} required")]
    InsufficientData {
        class: u32,
        available: usize,
        required: usize,
    },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid format: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("graph contract: {0}")]
    Graph(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: impl std::fmt::Debug, rhs: impl std::fmt::Debug) -> Self {
        Error::Shape {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }

    pub(crate) fn pre(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Precondition {
            op,
            msg: msg.into(),
        }
    }

    /// Process exit code for this error class (1 I/O, 2 validation, 3 numeric).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 1,
            Error::Numeric(_) | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
