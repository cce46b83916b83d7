use std::fmt;

use freespace::Error;

pub const USAGE: u8 = 1;
pub const PATH: u8 = 2;
pub const MALFORMED: u8 = 3;
pub const NO_CHECKPOINT: u8 = 4;
pub const DIVERGED: u8 = 5;

/// An error with a fixed exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub msg: String,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Exit {}

pub fn fail(code: u8, msg: impl Into<String>) -> anyhow::Error {
    Exit {
        code,
        msg: msg.into(),
    }
    .into()
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Divergence { .. } => DIVERGED,
                Error::Parse { .. } | Error::Ingest { .. } | Error::Format { .. } => MALFORMED,
                Error::Io(_) => PATH,
                _ => USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return PATH;
        }
    }
    USAGE
}
