use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("negative entry {value} at row {row}, column {col}")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("total budget {total} is below {layers} layers x minimum {min_budget}")]
    BudgetTooSmall {
        total: usize,
        layers: usize,
        min_budget: usize,
    },
    #[error("every layer preference is zero")]
    DegeneratePreferences,

    #[error("budget {budget} is smaller than the protected window of {window} slots")]
    BudgetBelowWindow { budget: usize, window: usize },
    #[error("budget {budget} exceeds the {slots} available slots")]
    BudgetAboveSlots { budget: usize, slots: usize },
    #[error("schedule increases at stage {stage} ({from} -> {to})")]
    IncreasingSchedule {
        stage: usize,
        from: usize,
        to: usize,
    },
    #[error("attention row has {got} entries but the cache holds {expected} slots")]
    RowLength { expected: usize, got: usize },

    #[error("bad magic {0:?}")]
    BadMagic(String),
    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed trace header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
