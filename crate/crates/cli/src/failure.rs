use std::fmt;

use adr_core::Error;

/// A command failure and the exit code it maps to: 1 usage or config,
/// 2 data, 3 numerical.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Failure::Data(msg.into())
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Usage(_) | Error::Dimension { .. } => Failure::Usage(msg),
            Error::NonFinite { .. } => Failure::Numerical(msg),
            Error::Parse { .. }
            | Error::Format { .. }
            | Error::Annotation(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => Failure::Data(msg),
        }
    }
}
