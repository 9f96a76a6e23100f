//! Typed message passing between the three actors, with in-process and
//! TCP backends and transcript capture for boundary assertions.

mod message;
mod network;
mod transcript;

pub use message::{Actor, MessageKind, Payload, ProtocolMessage};
pub use network::{connect, in_process, Backend, Endpoint, Endpoints, SharedTranscript, DEFAULT_TIMEOUT};
pub use transcript::{
    transcript_assert, AssertReport, Predicate, PredicateOutcome, Transcript, Violation,
};

use crate::error::{Error, Result};
use crate::he::CipherVector;
use crate::nn::Tensor2;

impl ProtocolMessage {
    pub fn into_matrix(self) -> Result<Tensor2> {
        match self.payload {
            Payload::Matrix(t) => Ok(t),
            other => Err(Error::Malformed(format!("expected matrix, got {}", other.type_name()))),
        }
    }

    pub fn into_ciphers(self) -> Result<CipherVector> {
        match self.payload {
            Payload::Ciphers(c) => Ok(c),
            other => Err(Error::Malformed(format!("expected ciphers, got {}", other.type_name()))),
        }
    }

    pub fn into_bigints(self) -> Result<Vec<num_bigint::BigUint>> {
        match self.payload {
            Payload::BigInts(v) => Ok(v),
            other => Err(Error::Malformed(format!("expected big integers, got {}", other.type_name()))),
        }
    }

    pub fn into_tokens(self) -> Result<Vec<[u8; 32]>> {
        match self.payload {
            Payload::Tokens(v) => Ok(v),
            other => Err(Error::Malformed(format!("expected tokens, got {}", other.type_name()))),
        }
    }

    pub fn into_ids(self) -> Result<Vec<u64>> {
        match self.payload {
            Payload::Ids(v) => Ok(v),
            other => Err(Error::Malformed(format!("expected ids, got {}", other.type_name()))),
        }
    }

    pub fn into_labels(self) -> Result<Vec<usize>> {
        match self.payload {
            Payload::Labels(v) => Ok(v),
            other => Err(Error::Malformed(format!("expected labels, got {}", other.type_name()))),
        }
    }

    pub fn into_text(self) -> Result<String> {
        match self.payload {
            Payload::Text(s) => Ok(s),
            other => Err(Error::Malformed(format!("expected text, got {}", other.type_name()))),
        }
    }
}
