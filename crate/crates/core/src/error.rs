use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("infeasible alignment: {frames} frames cannot emit {labels} labels")]
    InfeasibleAlignment { frames: usize, labels: usize },
    #[error("empty hypothesis: {0}")]
    EmptyHypothesis(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error("input too short: {0}")]
    InputTooShort(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by bad invocation or configuration rather than
    /// a failure while doing the work.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
