use std::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::he::{CipherVector, KeyId};
use crate::nn::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Actor {
    A,
    B,
    C,
}

impl Actor {
    pub const ALL: [Actor; 3] = [Actor::A, Actor::B, Actor::C];

    fn code(self) -> u8 {
        match self {
            Actor::A => 0,
            Actor::B => 1,
            Actor::C => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Actor::A,
            1 => Actor::B,
            2 => Actor::C,
            other => return Err(Error::Malformed(format!("actor code {other}"))),
        })
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    InferredBatch,
    GradTerm,
    CipherBlock,
    PartialSum,
    DeltaError,
    BlindedIds,
    MatrixBlock,
    Control,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::InferredBatch,
        MessageKind::GradTerm,
        MessageKind::CipherBlock,
        MessageKind::PartialSum,
        MessageKind::DeltaError,
        MessageKind::BlindedIds,
        MessageKind::MatrixBlock,
        MessageKind::Control,
    ];

    fn code(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u8 + 1
    }

    fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .get(usize::from(c).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Malformed(format!("message kind code {c}")))
    }

    /// Whether `payload` is a legal body for this kind.
    pub fn admits(self, payload: &Payload) -> bool {
        use MessageKind::*;
        matches!(
            (self, payload),
            (InferredBatch | GradTerm | PartialSum | DeltaError | MatrixBlock, Payload::Matrix(_))
                | (CipherBlock, Payload::Ciphers(_))
                | (BlindedIds, Payload::BigInts(_) | Payload::Tokens(_))
                | (
                    Control,
                    Payload::Text(_) | Payload::Ids(_) | Payload::Labels(_) | Payload::BigInts(_)
                )
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Matrix(Tensor2),
    Ciphers(CipherVector),
    BigInts(Vec<BigUint>),
    Tokens(Vec<[u8; 32]>),
    Labels(Vec<usize>),
    Ids(Vec<u64>),
    Text(String),
}

impl Payload {
    pub fn type_name(&self) -> &'static str {
        match self {
            Payload::Matrix(_) => "matrix",
            Payload::Ciphers(_) => "ciphers",
            Payload::BigInts(_) => "bigints",
            Payload::Tokens(_) => "tokens",
            Payload::Labels(_) => "labels",
            Payload::Ids(_) => "ids",
            Payload::Text(_) => "text",
        }
    }

    fn code(&self) -> u8 {
        match self {
            Payload::Matrix(_) => 1,
            Payload::Ciphers(_) => 2,
            Payload::BigInts(_) => 3,
            Payload::Tokens(_) => 4,
            Payload::Labels(_) => 5,
            Payload::Ids(_) => 6,
            Payload::Text(_) => 7,
        }
    }
}

/// Envelope for every cross-actor exchange.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolMessage {
    pub msg_id: u64,
    pub sender: Actor,
    pub receiver: Actor,
    pub kind: MessageKind,
    pub batch_tag: Option<u64>,
    pub payload: Payload,
}

impl ProtocolMessage {
    pub fn validate(&self) -> Result<()> {
        if self.sender == self.receiver {
            return Err(Error::Malformed(format!("{} sends to itself", self.sender)));
        }
        if !self.kind.admits(&self.payload) {
            return Err(Error::Malformed(format!(
                "{:?} cannot carry a {} payload",
                self.kind,
                self.payload.type_name()
            )));
        }
        Ok(())
    }

    /// Length-prefixed binary frame: `u32` LE length of the remainder, then
    /// kind, msg id, sender, receiver, optional batch tag and payload.
    /// Reals are IEEE-754 LE; big integers are length-prefixed big-endian.
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut body = Vec::new();
        body.push(self.kind.code());
        body.extend(self.msg_id.to_le_bytes());
        body.push(self.sender.code());
        body.push(self.receiver.code());
        match self.batch_tag {
            Some(t) => {
                body.push(1);
                body.extend(t.to_le_bytes());
            }
            None => body.push(0),
        }
        body.push(self.payload.code());
        match &self.payload {
            Payload::Matrix(t) => {
                put_u32(&mut body, t.rows())?;
                put_u32(&mut body, t.cols())?;
                for v in t.data() {
                    body.extend(v.to_le_bytes());
                }
            }
            Payload::Ciphers(c) => {
                body.extend(c.key.0.to_le_bytes());
                body.extend(c.scale_bits.to_le_bytes());
                put_bigints(&mut body, &c.ciphertexts)?;
            }
            Payload::BigInts(v) => put_bigints(&mut body, v)?,
            Payload::Tokens(v) => {
                put_u32(&mut body, v.len())?;
                for t in v {
                    body.extend(t);
                }
            }
            Payload::Labels(v) => {
                put_u32(&mut body, v.len())?;
                for &l in v {
                    put_u32(&mut body, l)?;
                }
            }
            Payload::Ids(v) => {
                put_u32(&mut body, v.len())?;
                for id in v {
                    body.extend(id.to_le_bytes());
                }
            }
            Payload::Text(s) => {
                put_u32(&mut body, s.len())?;
                body.extend(s.as_bytes());
            }
        }
        let mut frame = Vec::with_capacity(body.len() + 4);
        put_u32(&mut frame, body.len())?;
        frame.extend(body);
        Ok(frame)
    }

    pub fn decode(frame: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: frame, pos: 0 };
        let len = r.u32()? as usize;
        if len != frame.len() - 4 {
            return Err(Error::Malformed(format!(
                "frame length prefix {len}, body {}",
                frame.len() - 4
            )));
        }
        let kind = MessageKind::from_code(r.u8()?)?;
        let msg_id = r.u64()?;
        let sender = Actor::from_code(r.u8()?)?;
        let receiver = Actor::from_code(r.u8()?)?;
        let batch_tag = match r.u8()? {
            0 => None,
            1 => Some(r.u64()?),
            other => return Err(Error::Malformed(format!("batch tag flag {other}"))),
        };
        let payload = match r.u8()? {
            1 => {
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                let n = rows
                    .checked_mul(cols)
                    .ok_or_else(|| Error::Malformed("matrix size overflow".into()))?;
                r.need(n.saturating_mul(8))?;
                let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Payload::Matrix(
                    Tensor2::new(rows, cols, data)
                        .map_err(|e| Error::Malformed(e.to_string()))?,
                )
            }
            2 => {
                let key = KeyId(r.u64()?);
                let scale_bits = r.u32()?;
                Payload::Ciphers(CipherVector {
                    ciphertexts: r.bigints()?,
                    scale_bits,
                    key,
                })
            }
            3 => Payload::BigInts(r.bigints()?),
            4 => {
                let n = r.u32()? as usize;
                r.need(n.saturating_mul(32))?;
                Payload::Tokens(
                    (0..n)
                        .map(|_| r.take(32).map(|b| b.try_into().expect("32 bytes")))
                        .collect::<Result<_>>()?,
                )
            }
            5 => {
                let n = r.u32()? as usize;
                r.need(n.saturating_mul(4))?;
                Payload::Labels((0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?)
            }
            6 => {
                let n = r.u32()? as usize;
                r.need(n.saturating_mul(8))?;
                Payload::Ids((0..n).map(|_| r.u64()).collect::<Result<_>>()?)
            }
            7 => {
                let n = r.u32()? as usize;
                let bytes = r.take(n)?;
                Payload::Text(
                    String::from_utf8(bytes.to_vec())
                        .map_err(|_| Error::Malformed("text payload is not UTF-8".into()))?,
                )
            }
            other => return Err(Error::Malformed(format!("payload code {other}"))),
        };
        if r.pos != frame.len() {
            return Err(Error::Malformed("trailing bytes after payload".into()));
        }
        let msg = ProtocolMessage {
            msg_id,
            sender,
            receiver,
            kind,
            batch_tag,
            payload,
        };
        msg.validate()?;
        Ok(msg)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Malformed(format!("length {v} exceeds u32")))?;
    out.extend(v.to_le_bytes());
    Ok(())
}

fn put_bigints(out: &mut Vec<u8>, v: &[BigUint]) -> Result<()> {
    put_u32(out, v.len())?;
    for x in v {
        let bytes = x.to_bytes_be();
        put_u32(out, bytes.len())?;
        out.extend(bytes);
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn need(&self, n: usize) -> Result<()> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Malformed("frame truncated".into()));
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        self.need(n)?;
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bigints(&mut self) -> Result<Vec<BigUint>> {
        let n = self.u32()? as usize;
        self.need(n.saturating_mul(4))?;
        (0..n)
            .map(|_| {
                let len = self.u32()? as usize;
                Ok(BigUint::from_bytes_be(self.take(len)?))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(kind: MessageKind, payload: Payload) -> ProtocolMessage {
        ProtocolMessage {
            msg_id: 7,
            sender: Actor::A,
            receiver: Actor::B,
            kind,
            batch_tag: Some(3),
            payload,
        }
    }

    #[test]
    fn roundtrip_each_payload() {
        let cases = vec![
            msg(MessageKind::InferredBatch, Payload::Matrix(Tensor2::new(1, 2, vec![0.5, -1e-300]).unwrap())),
            msg(
                MessageKind::CipherBlock,
                Payload::Ciphers(CipherVector {
                    ciphertexts: vec![BigUint::from(0u32), BigUint::from(u128::MAX)],
                    scale_bits: 80,
                    key: KeyId(42),
                }),
            ),
            msg(MessageKind::BlindedIds, Payload::Tokens(vec![[9u8; 32]])),
            msg(MessageKind::Control, Payload::Labels(vec![0, 1, 9])),
            msg(MessageKind::Control, Payload::Ids(vec![u64::MAX])),
            msg(MessageKind::Control, Payload::Text("fold 3 ✓".into())),
        ];
        for m in cases {
            let frame = m.encode().unwrap();
            assert_eq!(ProtocolMessage::decode(&frame).unwrap(), m);
        }
    }

    #[test]
    fn schema_violation_rejected() {
        let bad = msg(MessageKind::PartialSum, Payload::Text("raw".into()));
        assert!(matches!(bad.encode(), Err(Error::Malformed(_))));
        let selfie = ProtocolMessage {
            receiver: Actor::A,
            ..msg(MessageKind::Control, Payload::Ids(vec![]))
        };
        assert!(selfie.validate().is_err());
    }

    #[test]
    fn truncated_and_garbage_frames() {
        let frame = msg(MessageKind::Control, Payload::Ids(vec![1, 2])).encode().unwrap();
        assert!(ProtocolMessage::decode(&frame[..frame.len() - 1]).is_err());
        let mut bad = frame.clone();
        bad[4] = 99;
        assert!(ProtocolMessage::decode(&bad).is_err());
        assert!(ProtocolMessage::decode(&[0, 0, 0, 0]).is_err());
    }
}
