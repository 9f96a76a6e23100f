use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::message::{Actor, MessageKind, Payload, ProtocolMessage};
use crate::error::{Error, Result};
use crate::he::KeyId;
use crate::nn::Tensor2;

/// Ordered record of delivered messages.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    messages: Vec<ProtocolMessage>,
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

impl Transcript {
    pub fn new(messages: Vec<ProtocolMessage>) -> Self {
        Self { messages }
    }

    pub fn push(&mut self, msg: ProtocolMessage) {
        self.messages.push(msg);
    }

    pub fn messages(&self) -> &[ProtocolMessage] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Messages `actor` sent or received.
    pub fn view(&self, actor: Actor) -> Vec<&ProtocolMessage> {
        self.messages
            .iter()
            .filter(|m| m.sender == actor || m.receiver == actor)
            .collect()
    }

    pub fn received_by(&self, actor: Actor) -> impl Iterator<Item = &ProtocolMessage> {
        self.messages.iter().filter(move |m| m.receiver == actor)
    }

    /// Messages appended after the first `from` entries.
    pub fn since(&self, from: usize) -> Transcript {
        Transcript::new(self.messages[from.min(self.len())..].to_vec())
    }

    /// The first `to` messages.
    pub fn until(&self, to: usize) -> Transcript {
        Transcript::new(self.messages[..to.min(self.len())].to_vec())
    }

    pub fn count_kind(&self, kind: MessageKind) -> usize {
        self.messages.iter().filter(|m| m.kind == kind).count()
    }

    /// Schema consistency and per-channel monotone message ids.
    pub fn validate(&self) -> Result<()> {
        let mut last: BTreeMap<(Actor, Actor), u64> = BTreeMap::new();
        for m in &self.messages {
            m.validate()?;
            if let Some(&prev) = last.get(&(m.sender, m.receiver)) {
                if m.msg_id <= prev {
                    return Err(Error::Malformed(format!(
                        "msg id {} after {prev} on channel {}→{}",
                        m.msg_id, m.sender, m.receiver
                    )));
                }
            }
            last.insert((m.sender, m.receiver), m.msg_id);
        }
        Ok(())
    }

    /// One JSON object per line with a SHA-256 of each frame. Payload
    /// contents are included only when `unsafe_audit` is set.
    pub fn to_ndjson(&self, unsafe_audit: bool) -> Result<String> {
        let mut out = String::new();
        for m in &self.messages {
            let frame = m.encode()?;
            let mut obj = json!({
                "msg_id": m.msg_id,
                "sender": m.sender,
                "receiver": m.receiver,
                "kind": m.kind,
                "batch_tag": m.batch_tag,
                "payload_type": m.payload.type_name(),
                "frame_bytes": frame.len(),
                "sha256": hex(&Sha256::digest(&frame)),
            });
            if unsafe_audit {
                obj["payload"] = payload_json(&m.payload);
            }
            out.push_str(&serde_json::to_string(&obj)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn payload_json(p: &Payload) -> Value {
    match p {
        Payload::Matrix(t) => json!({"rows": t.rows(), "cols": t.cols(), "data": t.data()}),
        Payload::Ciphers(c) => json!({
            "key": c.key.to_string(),
            "scale_bits": c.scale_bits,
            "values": c.ciphertexts.iter().map(|x| hex(&x.to_bytes_be())).collect::<Vec<_>>(),
        }),
        Payload::BigInts(v) => json!(v.iter().map(|x| hex(&x.to_bytes_be())).collect::<Vec<_>>()),
        Payload::Tokens(v) => json!(v.iter().map(|t| hex(t)).collect::<Vec<_>>()),
        Payload::Labels(v) => json!(v),
        Payload::Ids(v) => json!(v),
        Payload::Text(s) => json!(s),
    }
}

/// Declarative boundary checks over a transcript.
#[derive(Clone, Debug)]
pub enum Predicate {
    /// No matrix delivered to `to` contains any row of `rows`, bit for bit,
    /// as a contiguous run of entries within one of its rows.
    NoRowsTo {
        to: Actor,
        label: String,
        rows: Tensor2,
    },
    /// No matrix entry delivered to `to` equals one of `values` bit for bit.
    /// Callers leave out values that occur legitimately (such as 0 and 1).
    NoValuesTo {
        to: Actor,
        label: String,
        values: Vec<f64>,
    },
    /// Every ciphertext block delivered to `to` is under one of `keys`. An
    /// empty list forbids ciphertexts on every channel into `to`.
    CipherKeys { to: Actor, keys: Vec<KeyId> },
    /// Only the listed kinds travel on `from → to`.
    KindsAllowed {
        from: Actor,
        to: Actor,
        kinds: Vec<MessageKind>,
    },
    /// Nothing delivered to `to` reveals a `forbidden` id, either directly
    /// in an id list or via a value that `inverse` maps back to it. `inverse`
    /// models what `to` can compute on its own (keys: big-endian bytes of
    /// integers, or raw tokens).
    NoIdsTo {
        to: Actor,
        label: String,
        forbidden: HashSet<u64>,
        inverse: HashMap<Vec<u8>, u64>,
    },
}

impl Predicate {
    pub fn name(&self) -> String {
        match self {
            Predicate::NoRowsTo { to, label, .. } => format!("no rows of {label} reach {to}"),
            Predicate::NoValuesTo { to, label, .. } => format!("no values of {label} reach {to}"),
            Predicate::CipherKeys { to, keys } => {
                let keys: Vec<String> = keys.iter().map(KeyId::to_string).collect();
                format!("ciphertexts to {to} only under [{}]", keys.join(", "))
            }
            Predicate::KindsAllowed { from, to, kinds } => {
                format!("only {kinds:?} on {from}→{to}")
            }
            Predicate::NoIdsTo { to, label, .. } => format!("no {label} ids revealed to {to}"),
        }
    }

    /// First violating message, if any.
    fn check(&self, t: &Transcript) -> Option<Violation> {
        match self {
            Predicate::NoRowsTo { to, rows, .. } => {
                let d = rows.cols();
                if d == 0 {
                    return None;
                }
                let secret: HashSet<Vec<u64>> = rows
                    .iter_rows()
                    .map(|r| r.iter().map(|v| v.to_bits()).collect())
                    .collect();
                t.received_by(*to).find_map(|m| match &m.payload {
                    Payload::Matrix(x) if x.cols() >= d => x.iter_rows().enumerate().find_map(|(i, row)| {
                        let bits: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
                        bits.windows(d).position(|w| secret.contains(w)).map(|j| Violation {
                            msg_id: m.msg_id,
                            detail: format!("row {i}, columns {j}..{}", j + d),
                        })
                    }),
                    _ => None,
                })
            }
            Predicate::NoValuesTo { to, values, .. } => {
                let secret: HashSet<u64> = values.iter().map(|v| v.to_bits()).collect();
                t.received_by(*to).find_map(|m| match &m.payload {
                    Payload::Matrix(x) => x
                        .data()
                        .iter()
                        .position(|v| secret.contains(&v.to_bits()))
                        .map(|k| Violation {
                            msg_id: m.msg_id,
                            detail: format!("entry {k} = {}", x.data()[k]),
                        }),
                    _ => None,
                })
            }
            Predicate::CipherKeys { to, keys } => t.received_by(*to).find_map(|m| match &m.payload {
                Payload::Ciphers(c) if !keys.contains(&c.key) => Some(Violation {
                    msg_id: m.msg_id,
                    detail: format!("ciphertexts under key {}", c.key),
                }),
                _ => None,
            }),
            Predicate::KindsAllowed { from, to, kinds } => t
                .messages()
                .iter()
                .find(|m| m.sender == *from && m.receiver == *to && !kinds.contains(&m.kind))
                .map(|m| Violation {
                    msg_id: m.msg_id,
                    detail: format!("kind {:?}", m.kind),
                }),
            Predicate::NoIdsTo {
                to,
                forbidden,
                inverse,
                ..
            } => t.received_by(*to).find_map(|m| {
                let hit = |id: u64| forbidden.contains(&id).then_some(id);
                let found = match &m.payload {
                    Payload::Ids(v) => v.iter().find_map(|&id| hit(id)),
                    Payload::BigInts(v) => v
                        .iter()
                        .find_map(|x| inverse.get(&x.to_bytes_be()).and_then(|&id| hit(id))),
                    Payload::Tokens(v) => v
                        .iter()
                        .find_map(|x| inverse.get(&x[..]).and_then(|&id| hit(id))),
                    Payload::Ciphers(c) => c
                        .ciphertexts
                        .iter()
                        .find_map(|x| inverse.get(&x.to_bytes_be()).and_then(|&id| hit(id))),
                    _ => None,
                };
                found.map(|id| Violation {
                    msg_id: m.msg_id,
                    detail: format!("reveals id {id}"),
                })
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub msg_id: u64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredicateOutcome {
    pub name: String,
    pub violation: Option<Violation>,
}

impl PredicateOutcome {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AssertReport {
    pub outcomes: Vec<PredicateOutcome>,
}

impl AssertReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(PredicateOutcome::passed)
    }

    pub fn failures(&self) -> Vec<&PredicateOutcome> {
        self.outcomes.iter().filter(|o| !o.passed()).collect()
    }
}

impl std::fmt::Display for AssertReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for o in &self.outcomes {
            match &o.violation {
                None => writeln!(f, "ok    {}", o.name)?,
                Some(v) => writeln!(f, "FAIL  {} (msg {}: {})", o.name, v.msg_id, v.detail)?,
            }
        }
        Ok(())
    }
}

/// Evaluates `predicates` over a validated transcript.
pub fn transcript_assert(t: &Transcript, predicates: &[Predicate]) -> Result<AssertReport> {
    t.validate()?;
    Ok(AssertReport {
        outcomes: predicates
            .iter()
            .map(|p| PredicateOutcome {
                name: p.name(),
                violation: p.check(t),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_msg(id: u64, to: Actor, data: Vec<f64>, cols: usize) -> ProtocolMessage {
        ProtocolMessage {
            msg_id: id,
            sender: if to == Actor::A { Actor::B } else { Actor::A },
            receiver: to,
            kind: MessageKind::InferredBatch,
            batch_tag: None,
            payload: Payload::Matrix(Tensor2::new(data.len() / cols, cols, data).unwrap()),
        }
    }

    fn raw() -> Tensor2 {
        Tensor2::new(2, 2, vec![0.11, 0.22, 0.33, 0.44]).unwrap()
    }

    #[test]
    fn empty_transcript_passes() {
        let preds = [Predicate::NoRowsTo {
            to: Actor::A,
            label: "raw B".into(),
            rows: raw(),
        }];
        assert!(transcript_assert(&Transcript::default(), &preds).unwrap().passed());
    }

    #[test]
    fn injected_leak_is_caught() {
        let t = Transcript::new(vec![
            matrix_msg(0, Actor::A, vec![0.5, 0.6], 2),
            matrix_msg(1, Actor::A, vec![0.9, 0.33, 0.44], 3),
        ]);
        let preds = [
            Predicate::NoRowsTo {
                to: Actor::A,
                label: "raw B".into(),
                rows: raw(),
            },
            Predicate::NoValuesTo {
                to: Actor::A,
                label: "raw B".into(),
                values: vec![0.22],
            },
        ];
        let report = transcript_assert(&t, &preds).unwrap();
        let v = report.outcomes[0].violation.as_ref().unwrap();
        assert_eq!(v.msg_id, 1);
        assert!(report.outcomes[1].passed());
        assert!(!report.passed());
    }

    #[test]
    fn kinds_and_keys() {
        let t = Transcript::new(vec![matrix_msg(4, Actor::C, vec![1.0], 1)]);
        let preds = [
            Predicate::KindsAllowed {
                from: Actor::A,
                to: Actor::C,
                kinds: vec![MessageKind::PartialSum],
            },
            Predicate::CipherKeys {
                to: Actor::C,
                keys: vec![KeyId(1)],
            },
        ];
        let report = transcript_assert(&t, &preds).unwrap();
        assert_eq!(report.outcomes[0].violation.as_ref().unwrap().msg_id, 4);
        assert!(report.outcomes[1].passed());
    }

    #[test]
    fn foreign_key_ciphertexts_are_flagged() {
        let block = |id: u64, key: u64| ProtocolMessage {
            msg_id: id,
            sender: Actor::B,
            receiver: Actor::A,
            kind: MessageKind::CipherBlock,
            batch_tag: Some(0),
            payload: Payload::Ciphers(crate::he::CipherVector {
                ciphertexts: vec![7u32.into()],
                scale_bits: 40,
                key: KeyId(key),
            }),
        };
        let t = Transcript::new(vec![block(1, 1), block(2, 2), block(3, 3)]);
        let allowed = Predicate::CipherKeys {
            to: Actor::A,
            keys: vec![KeyId(1), KeyId(2)],
        };
        let report = transcript_assert(&t, &[allowed]).unwrap();
        assert_eq!(report.outcomes[0].violation.as_ref().unwrap().msg_id, 3);
        let none = Predicate::CipherKeys {
            to: Actor::A,
            keys: vec![],
        };
        assert!(!transcript_assert(&t, &[none]).unwrap().passed());
    }

    #[test]
    fn non_monotone_ids_are_malformed() {
        let t = Transcript::new(vec![
            matrix_msg(5, Actor::A, vec![1.0], 1),
            matrix_msg(5, Actor::A, vec![1.0], 1),
        ]);
        assert!(transcript_assert(&t, &[]).is_err());
    }

    #[test]
    fn ndjson_hides_payload_unless_audited() {
        let t = Transcript::new(vec![matrix_msg(0, Actor::A, vec![0.125], 1)]);
        let safe = t.to_ndjson(false).unwrap();
        assert!(!safe.contains("0.125"));
        assert!(safe.contains("sha256"));
        assert!(t.to_ndjson(true).unwrap().contains("0.125"));
    }
}
