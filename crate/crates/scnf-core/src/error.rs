use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// The variants map onto the CLI exit-code discipline: `Argument`, `Usage`
/// and `Config` are caller mistakes (exit 2), `Format` and `Io` are data
/// problems (exit 3), `Domain`, `Numeric` and `Diverged` are numeric
/// failures (exit 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("config error (line {line}): {msg}")]
    Config { line: usize, msg: String },
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Usage(_) | Error::Config { .. } => 2,
            Error::Format { .. } | Error::Io(_) => 3,
            Error::ShapeMismatch { .. }
            | Error::Domain(_)
            | Error::Numeric(_)
            | Error::Diverged { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
