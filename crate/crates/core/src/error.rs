//! Error type shared by every layer of the service.
//!
//! Errors cross the wire, so every variant has a stable numeric code
//! (see [`Error::code`]) and can be rebuilt from `(code, message, shard)`.

use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("embedding key is empty")]
    EmptyKey,

    #[error("embedding key of {0} bytes exceeds the 64 KiB limit")]
    KeyTooLarge(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFiniteValue(String),

    #[error("storage backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("failed to write snapshot: {0}")]
    SinkWriteFailure(String),

    #[error("malformed data: {0}")]
    FormatError(String),

    #[error("no keys to sample from and no positives given")]
    EmptyUniverse,

    #[error("unknown table `{0}`")]
    UnknownTable(String),

    #[error("worker for shard {shard} is unreachable: {reason}")]
    WorkerUnreachable { shard: u32, reason: String },

    #[error("checkpoint is incomplete: {0}")]
    PartialCheckpoint(String),

    #[error("config digest mismatch: {0}")]
    DigestMismatch(String),

    #[error("sandbox mode forbids `{0}`")]
    SandboxViolation(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub fn invalid_config(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Stable wire code.
    pub fn code(&self) -> u16 {
        match self {
            Error::InvalidConfig { .. } => 1,
            Error::EmptyKey => 2,
            Error::KeyTooLarge(_) => 3,
            Error::DimensionMismatch { .. } => 4,
            Error::NonFiniteValue(_) => 5,
            Error::BackendUnavailable(_) => 6,
            Error::SinkWriteFailure(_) => 7,
            Error::FormatError(_) => 8,
            Error::EmptyUniverse => 9,
            Error::UnknownTable(_) => 10,
            Error::WorkerUnreachable { .. } => 11,
            Error::PartialCheckpoint(_) => 12,
            Error::DigestMismatch(_) => 13,
            Error::SandboxViolation(_) => 14,
            Error::ShapeMismatch(_) => 15,
            Error::Protocol(_) => 16,
            Error::InvalidArgument(_) => 17,
            Error::Io(_) => 18,
        }
    }

    /// Parts carried in an error frame: code, two string fields and two integers.
    pub(crate) fn to_parts(&self) -> (u16, String, String, u64, u64) {
        let code = self.code();
        match self {
            Error::InvalidConfig { field, reason } => (code, field.clone(), reason.clone(), 0, 0),
            Error::EmptyKey | Error::EmptyUniverse => (code, String::new(), String::new(), 0, 0),
            Error::KeyTooLarge(n) => (code, String::new(), String::new(), *n as u64, 0),
            Error::DimensionMismatch { expected, got } => {
                (code, String::new(), String::new(), *expected as u64, *got as u64)
            }
            Error::WorkerUnreachable { shard, reason } => (code, reason.clone(), String::new(), *shard as u64, 0),
            Error::NonFiniteValue(s)
            | Error::BackendUnavailable(s)
            | Error::SinkWriteFailure(s)
            | Error::FormatError(s)
            | Error::UnknownTable(s)
            | Error::PartialCheckpoint(s)
            | Error::DigestMismatch(s)
            | Error::SandboxViolation(s)
            | Error::ShapeMismatch(s)
            | Error::Protocol(s)
            | Error::InvalidArgument(s)
            | Error::Io(s) => (code, s.clone(), String::new(), 0, 0),
        }
    }

    pub(crate) fn from_parts(code: u16, a: String, b: String, x: u64, y: u64) -> Self {
        match code {
            1 => Error::InvalidConfig { field: a, reason: b },
            2 => Error::EmptyKey,
            3 => Error::KeyTooLarge(x as usize),
            4 => Error::DimensionMismatch {
                expected: x as usize,
                got: y as usize,
            },
            5 => Error::NonFiniteValue(a),
            6 => Error::BackendUnavailable(a),
            7 => Error::SinkWriteFailure(a),
            8 => Error::FormatError(a),
            9 => Error::EmptyUniverse,
            10 => Error::UnknownTable(a),
            11 => Error::WorkerUnreachable {
                shard: x as u32,
                reason: a,
            },
            12 => Error::PartialCheckpoint(a),
            13 => Error::DigestMismatch(a),
            14 => Error::SandboxViolation(a),
            15 => Error::ShapeMismatch(a),
            16 => Error::Protocol(a),
            17 => Error::InvalidArgument(a),
            _ => Error::Io(a),
        }
    }
}
