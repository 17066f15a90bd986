use thiserror::Error;

/// Library-wide error type.
///
/// Numerical routines report *where* they failed (grid node index) so a
/// blow-up can be traced to a specific time, not just a specific call.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("numerical blow-up at node {node} (t = {time}): {what}")]
    NumericalBlowup { node: usize, time: f64, what: String },

    #[error("synthesis failure at node {node}: {what}")]
    SynthesisFailure { node: usize, what: String },

    #[error("causality violation: {what}")]
    CausalityViolation { what: String },

    #[error("scenario validation failed:\n{}", format_issues(.issues))]
    Validation { issues: Vec<ValidationIssue> },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One problem found while validating a scenario document.
///
/// `key` is the dotted config path (e.g. `cost.Q`) so the user can fix the
/// exact line; validation collects every issue instead of stopping at the
/// first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub key: String,
    pub message: String,
}

impl ValidationIssue {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub type Result<T> = std::result::Result<T, Error>;
