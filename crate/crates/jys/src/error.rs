use thiserror::Error;

/// Errors surfaced by the library. CLI exit codes: usage errors map to 1,
/// verification failures to 2, numerical errors to 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid interval: expected s < t, got s={s}, t={t}")]
    Interval { s: f64, t: f64 },

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("zero support: q_t(x) = 0 at t={t} for state {state:?}")]
    ZeroSupport { t: f64, state: Vec<usize> },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("unsupported kernel family: {0}")]
    UnsupportedFamily(String),

    #[error("state space too large: {states} states exceeds cap {cap}")]
    SpaceTooLarge { states: u128, cap: u64 },

    #[error("integration failure: {0}")]
    Integration(String),

    #[error("search failure at t={t}: {msg}")]
    Search { t: f64, msg: String },

    #[error("thinning bound violated {retries} times in a row at t={t}")]
    BoundViolation { t: f64, retries: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
