use thiserror::Error;

/// Errors raised by the pricing, duality and limit routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid market parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("shock sequence entries must be +1 or -1, found {0}")]
    InvalidShock(i8),

    #[error("length mismatch: {what} (expected {expected}, got {got})")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("payoff not supported here: {0}")]
    UnsupportedPayoff(String),

    #[error("invalid payoff specification: {0}")]
    InvalidPayoff(String),

    #[error("stability condition violated: {0}")]
    Stability(String),

    #[error("martingale condition violated: {0}")]
    NotMartingale(String),

    #[error("degenerate certificate: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;
