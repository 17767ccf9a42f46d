//! Error taxonomy shared by every module.
//!
//! Variants map onto the process exit codes used by the `fedsim` binary:
//! `Config` exits 1, `Budget` exits 3, everything else exits 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or layer-id mismatch between parameter sets, or a malformed
    /// container (empty layer list, value count not matching the shape).
    #[error("structural error: {0}")]
    Structural(String),

    /// An argument outside its documented domain (negative sigma, norm order
    /// below one, fraction outside (0, 1], ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value produced or encountered mid-computation. The
    /// message names the offending layer or agent where known.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed training data: out-of-range ids, length mismatches.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid scenario description or corruption script.
    #[error("scenario error: {0}")]
    Scenario(String),

    /// A computation refused because it exceeds a stated resource cap.
    #[error("budget error: {0}")]
    Budget(String),

    /// Invalid or inconsistent experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    /// Exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Budget(_) => 3,
            _ => 2,
        }
    }

    /// Prefix the message with where the failure happened, keeping the
    /// variant (and therefore the exit code) intact.
    pub fn with_context(self, ctx: &str) -> Error {
        match self {
            Error::Structural(m) => Error::Structural(format!("{ctx}: {m}")),
            Error::Domain(m) => Error::Domain(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
            Error::Scenario(m) => Error::Scenario(format!("{ctx}: {m}")),
            Error::Budget(m) => Error::Budget(format!("{ctx}: {m}")),
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Serialization(m) => Error::Serialization(format!("{ctx}: {m}")),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{ctx}: {e}"))),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
