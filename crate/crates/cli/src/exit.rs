//! Exit codes: 0 success, 1 validation, 2 runtime, 3 partial results.

use std::fmt;
use std::path::PathBuf;

pub const OK: u8 = 0;
pub const VALIDATION: u8 = 1;
pub const RUNTIME: u8 = 2;
pub const PARTIAL: u8 = 3;

/// Bad input or configuration, detected before or instead of any work.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// The command stopped early but left usable outputs behind.
#[derive(Debug)]
pub struct Partial {
    pub reason: String,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for Partial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} file(s) written)", self.reason, self.files.len())
    }
}

impl std::error::Error for Partial {}

pub fn code(err: &anyhow::Error) -> u8 {
    use points2pix::Error as E;
    if err.downcast_ref::<Partial>().is_some() {
        return PARTIAL;
    }
    for cause in err.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Param { .. } | E::Parse { .. } | E::MissingKey { .. } | E::Checkpoint(_) | E::Invalid(_) => VALIDATION,
                _ => RUNTIME,
            };
        }
    }
    RUNTIME
}
