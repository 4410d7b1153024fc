use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("batch of {got} is too small for {context} (need at least {needed})")]
    BatchTooSmall {
        context: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("class index {class} out of range for {num_classes} classes")]
    InvalidClass { class: usize, num_classes: usize },
    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("source model reached {accuracy:.4} clean accuracy, below the required {required:.2}")]
    NonConvergence { accuracy: f64, required: f64 },
    #[error("numeric blow-up at step {step} ({what}); last good step: {last_good:?}")]
    NumericBlowUp {
        step: usize,
        last_good: Option<usize>,
        what: String,
    },
    #[error("schedule error: {0}")]
    Schedule(String),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
