//! Process exit codes.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | runtime failure: server unreachable, transfer or protocol error |
//! | 2 | usage error: bad flags, unknown scenario, unreadable config |
//! | 3 | integrity failure: received bytes differ from what was published |
//! | 4 | a simulation script violated one of its assertions |

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    Runtime = 1,
    Usage = 2,
    Integrity = 3,
    Violated = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub message: String,
}

impl Failure {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Failure::new(Code::Usage, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Failure>() {
            Ok(f) => f,
            Err(e) => Failure::new(Code::Runtime, format!("{e:#}")),
        }
    }
}

impl From<ros_client::ClientError> for Failure {
    fn from(e: ros_client::ClientError) -> Self {
        Failure::new(Code::Runtime, e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Failure>;
