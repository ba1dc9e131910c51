use thiserror::Error;

/// Errors raised by the toolkit.
///
/// Variants are split into validation failures (bad input, mismatched
/// artifacts) and runtime failures; [`Error::is_validation`] drives the CLI
/// exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("column `{0}` not found")]
    MissingColumn(String),

    #[error("column `{0}` is categorical; a numeric column is required")]
    NotNumeric(String),

    #[error("degenerate outcome: {0}")]
    DegenerateOutcome(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("plan/data mismatch: plan {plan_hash} was built for {plan_rows} rows, data {data_hash} has {data_rows} rows")]
    PlanMismatch {
        plan_hash: String,
        data_hash: String,
        plan_rows: usize,
        data_rows: usize,
    },

    #[error("fit failed: {0}")]
    Fit(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors caused by the caller's input rather than by a
    /// computation going wrong.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::NotNumeric(_)
                | Error::DegenerateOutcome(_)
                | Error::Invalid(_)
                | Error::PlanMismatch { .. }
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
