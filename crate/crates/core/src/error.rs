use std::io;

use thiserror::Error;

use crate::transport::MessageKind;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("random generator failure: {0}")]
    Rng(String),

    #[error("crypto error: {0}")]
    Crypto(String),

    #[error("fixed-point value outside the representable band")]
    BandOverflow,

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("unexpected message: wanted {expected:?}, got {actual:?} (msg {msg_id})")]
    UnexpectedMessage {
        expected: MessageKind,
        actual: MessageKind,
        msg_id: u64,
    },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("transport timeout after {0:?}")]
    Timeout(std::time::Duration),

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("singular or ill-conditioned matrix: {0}")]
    Singular(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors that indicate a broken protocol run rather than bad
    /// input or I/O.
    pub fn is_protocol_violation(&self) -> bool {
        matches!(
            self,
            Error::Protocol(_)
                | Error::UnexpectedMessage { .. }
                | Error::BandOverflow
                | Error::Transport(_)
                | Error::Timeout(_)
                | Error::Malformed(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
