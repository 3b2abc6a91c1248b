//! Exit-code contract and the error type carrying it.

use std::fmt;

use taskvec::Error;

pub const CONFIG: u8 = 2;
pub const TRAINING: u8 = 3;
pub const COMPAT: u8 = 4;
pub const EXPERIMENT: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Self::new(CONFIG, anyhow::anyhow!("{msg}"))
    }

    pub fn compat(msg: impl fmt::Display) -> Self {
        Self::new(COMPAT, anyhow::anyhow!("{msg}"))
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

/// Compatibility failures keep their own code wherever they surface.
fn classify(e: &Error, default: u8) -> u8 {
    if e.is_compat() || matches!(e, Error::ArchMismatch { .. }) {
        COMPAT
    } else {
        default
    }
}

pub trait OrExit<T> {
    /// Maps an error to `code` (compatibility errors always map to 4),
    /// prefixing `context` to the message.
    fn or_exit(self, code: u8, context: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> OrExit<T> for taskvec::Result<T> {
    fn or_exit(self, code: u8, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| {
            let code = classify(&e, code);
            Failure::new(code, anyhow::Error::new(e).context(context()))
        })
    }
}

impl<T> OrExit<T> for std::io::Result<T> {
    fn or_exit(self, code: u8, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| Failure::new(code, anyhow::Error::new(e).context(context())))
    }
}

impl<T> OrExit<T> for serde_json::Result<T> {
    fn or_exit(self, code: u8, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| Failure::new(code, anyhow::Error::new(e).context(context())))
    }
}
