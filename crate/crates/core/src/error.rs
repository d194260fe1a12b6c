use thiserror::Error;

use crate::report::MethodId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("integration step {step} h exceeds the smallest inter-dose gap {gap} h")]
    StepTooLarge { step: f64, gap: f64 },

    #[error("unknown arm id {0}")]
    UnknownArm(u8),

    #[error("unknown subject id {0}")]
    UnknownSubject(usize),

    #[error("estimator received a {0} dataset; only observed data may be analysed")]
    Regime(&'static str),

    #[error("arm {arm}: need at least 2 subjects, found {found}")]
    TooFewSubjects { arm: u8, found: usize },

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("positivity violation: {0}")]
    Positivity(String),

    #[error("complete separation in IE model at week {week}")]
    Separation { week: usize },

    #[error("{method:?} estimation failed for arm {arm}: {reason}")]
    Estimation {
        method: MethodId,
        arm: u8,
        reason: String,
    },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("nothing to emit")]
    EmptyRows,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
