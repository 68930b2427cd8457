use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("self pair: user `{0}` cannot be paired with itself")]
    SelfPair(String),

    #[error("invalid user id {0:?}: must be non-empty and contain no whitespace")]
    InvalidUserId(String),

    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("negative timestamp {ts} on line {line}")]
    NegativeTimestamp { line: usize, ts: i64 },

    #[error("events for user `{found}` mixed into profile of `{expected}`")]
    MixedUsers { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("target unreachable: {0}")]
    TargetUnreachable(String),

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("insufficient population: need {needed} eligible users, found {found}")]
    InsufficientPopulation { needed: usize, found: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("training data has a single class")]
    SingleClass,

    #[error("empty input")]
    EmptyInput,

    #[error("K = {k} folds is invalid for {n} samples")]
    KTooLarge { k: usize, n: usize },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFew { needed: usize, got: usize },

    #[error("all {0} ranking groups are degenerate (single relevance level)")]
    DegenerateGroups(usize),

    #[error("gold set is empty")]
    EmptyGold,

    #[error("scored pairs are not sorted by descending weight (position {0})")]
    NotSorted(usize),

    #[error("non-finite score for pair {0}")]
    NonFinite(String),

    #[error("model format: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
