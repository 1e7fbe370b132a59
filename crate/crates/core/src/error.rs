use thiserror::Error;

/// Rejections raised by the order book.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LobError {
    #[error("order id {0} already used (ids must be fresh and increasing)")]
    DuplicateOrderId(u64),
    #[error("order size must be at least one lot, got {0}")]
    InvalidSize(i64),
    #[error("order price must be at least one tick, got {0}")]
    InvalidPrice(i64),
    #[error("no liquidity on the opposite side")]
    NoLiquidity,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Lob(#[from] LobError),
    #[error("invalid behavior vector: {0}")]
    InvalidBehavior(String),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("insufficient history: need {need}, have {have}")]
    InsufficientHistory { need: usize, have: usize },
    #[error("macro table has no row for {year}-{month:02}")]
    MissingMonth { year: i32, month: u32 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("simulation failed for day {day}, draw {draw}: {source}")]
    Simulation {
        day: usize,
        draw: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("toml parse: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("toml write: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
