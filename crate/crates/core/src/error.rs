use thiserror::Error;

/// Errors raised while applying events to a trial.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrialError {
    #[error("inconsistent event: {0}")]
    InconsistentEvent(String),
    #[error("dose {dose} is outside 1..={num_doses}")]
    DoseOutOfRange { dose: usize, num_doses: usize },
}

/// Errors from the complete-data decision rules.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuleError {
    #[error("invalid tally: y={y}, n={n}")]
    InvalidTally { y: u32, n: u32 },
    #[error("dose {0} has pending DLT outcomes; route through the POD engine")]
    PendingOutcomes(usize),
    #[error("dose {0} has not been tried")]
    Untried(usize),
    #[error("isotonic regression needs at least one point")]
    EmptyInput,
}

/// Errors from the probability-of-decision engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PodError {
    #[error("{pending} pending outcomes exceed the enumeration cap of {cap}")]
    TooManyPending { pending: usize, cap: usize },
    #[error(transparent)]
    Rule(#[from] RuleError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EfficacyError {
    #[error("no dose has evaluable efficacy outcomes")]
    NoEfficacyData,
}

/// A single field-level validation failure.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("validation failed: {}", summary(.0))]
pub struct ValidationError(pub Vec<FieldError>);

fn summary(errs: &[FieldError]) -> String {
    errs.iter()
        .map(|e| format!("{}: {}", e.field, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl ValidationError {
    pub fn single(field: &str, message: impl Into<String>) -> Self {
        ValidationError(vec![FieldError {
            field: field.to_string(),
            message: message.into(),
        }])
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("malformed document: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unknown report format {0:?} (expected csv or text)")]
    UnknownFormat(String),
    #[error("malformed OC csv: {0}")]
    Malformed(String),
}

/// Errors while the engine drives a trial forward.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConductError {
    #[error(transparent)]
    Trial(#[from] TrialError),
    #[error(transparent)]
    Pod(#[from] PodError),
}
