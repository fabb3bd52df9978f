use thiserror::Error;

/// Errors surfaced by the library.
///
/// Variants are grouped by failure class so callers (notably the CLI) can map
/// them to distinct exit codes: configuration/contract violations, I/O and
/// file-format problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context} at position ({row}, {col})")]
    NonFinite {
        context: &'static str,
        row: usize,
        col: usize,
    },

    #[error("invalid parameter {name}: {message}")]
    InvalidParam { name: &'static str, message: String },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{variant} requires the {slot} noise prediction but it was not provided")]
    MissingPrediction {
        variant: &'static str,
        slot: &'static str,
    },

    #[error("dimension mismatch at projection {projection}: expected {expected} input columns, found {found}")]
    Projection {
        projection: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("schedule length mismatch for {name}: expected {expected} entries, found {found}")]
    ScheduleLength {
        name: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("step index {step} out of range for {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("timestep {t} outside schedule range 0..={max}")]
    UnknownTimestep { t: usize, max: usize },

    #[error("{what} must not be empty")]
    EmptyInput { what: &'static str },

    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,

    #[error("pareto points carry inconsistent coordinates: {message}")]
    InconsistentCoordinates { message: String },

    #[error("duplicate {kind} id {id:?} in dataset manifest")]
    DuplicateId { kind: &'static str, id: String },

    #[error(
        "record count mismatch for {setting} setting: expected {identities} identities x {prompts} prompts = {expected} records, found {found}"
    )]
    CountMismatch {
        setting: &'static str,
        identities: usize,
        prompts: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid record for identity {identity} / prompt {prompt}: {message}")]
    InvalidRecord {
        identity: String,
        prompt: String,
        message: String,
    },

    #[error("corrupt tensor file at byte offset {offset}: {message}")]
    TensorFormat { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
