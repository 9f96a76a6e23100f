use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::message::{Actor, MessageKind, Payload, ProtocolMessage};
use super::transcript::Transcript;
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Transcript shared by all endpoints of one network.
pub type SharedTranscript = Arc<Mutex<Transcript>>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Channels inside one process. Deterministic and the default.
    #[default]
    InProcess,
    /// One localhost socket per directed channel.
    Tcp,
}

trait FrameSink: Send {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()>;
}

struct ChannelSink(Sender<Vec<u8>>);

impl FrameSink for ChannelSink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        self.0
            .send(frame)
            .map_err(|_| Error::Transport("channel closed by receiver".into()))
    }
}

struct TcpSink(TcpStream);

impl FrameSink for TcpSink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        self.0
            .write_all(&frame)
            .map_err(|e| Error::Transport(format!("tcp send: {e}")))
    }
}

/// One actor's view of the network: a sender to and a receiver from each
/// other actor.
pub struct Endpoint {
    actor: Actor,
    sinks: BTreeMap<Actor, Box<dyn FrameSink>>,
    sources: BTreeMap<Actor, Receiver<Vec<u8>>>,
    last_received: BTreeMap<Actor, u64>,
    counter: Arc<AtomicU64>,
    transcript: SharedTranscript,
    timeout: Duration,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint").field("actor", &self.actor).finish()
    }
}

/// The three connected endpoints of a fresh network.
#[derive(Debug)]
pub struct Endpoints {
    pub a: Endpoint,
    pub b: Endpoint,
    pub c: Endpoint,
    pub transcript: SharedTranscript,
}

impl Endpoints {
    pub fn get_mut(&mut self, actor: Actor) -> &mut Endpoint {
        match actor {
            Actor::A => &mut self.a,
            Actor::B => &mut self.b,
            Actor::C => &mut self.c,
        }
    }

    /// Snapshot of everything delivered so far.
    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().expect("transcript lock").clone()
    }
}

pub fn connect(backend: Backend, timeout: Duration) -> Result<Endpoints> {
    let counter = Arc::new(AtomicU64::new(0));
    let transcript: SharedTranscript = Arc::new(Mutex::new(Transcript::default()));
    let mut sinks: BTreeMap<Actor, BTreeMap<Actor, Box<dyn FrameSink>>> = BTreeMap::new();
    let mut sources: BTreeMap<Actor, BTreeMap<Actor, Receiver<Vec<u8>>>> = BTreeMap::new();
    for from in Actor::ALL {
        for to in Actor::ALL {
            if from == to {
                continue;
            }
            let (sink, source) = match backend {
                Backend::InProcess => {
                    let (tx, rx) = mpsc::channel();
                    (Box::new(ChannelSink(tx)) as Box<dyn FrameSink>, rx)
                }
                Backend::Tcp => tcp_channel()?,
            };
            sinks.entry(from).or_default().insert(to, sink);
            sources.entry(to).or_default().insert(from, source);
        }
    }
    let mut make = |actor| Endpoint {
        actor,
        sinks: sinks.remove(&actor).unwrap_or_default(),
        sources: sources.remove(&actor).unwrap_or_default(),
        last_received: BTreeMap::new(),
        counter: Arc::clone(&counter),
        transcript: Arc::clone(&transcript),
        timeout,
    };
    Ok(Endpoints {
        a: make(Actor::A),
        b: make(Actor::B),
        c: make(Actor::C),
        transcript,
    })
}

pub fn in_process() -> Endpoints {
    connect(Backend::InProcess, DEFAULT_TIMEOUT).expect("in-process network cannot fail")
}

/// Sending half and receiving queue of one directed link.
type Channel = (Box<dyn FrameSink>, Receiver<Vec<u8>>);

fn tcp_channel() -> Result<Channel> {
    let listener = TcpListener::bind(("127.0.0.1", 0))
        .map_err(|e| Error::Transport(format!("tcp bind: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Error::Transport(format!("tcp addr: {e}")))?;
    let client =
        TcpStream::connect(addr).map_err(|e| Error::Transport(format!("tcp connect: {e}")))?;
    let (mut server, _) = listener
        .accept()
        .map_err(|e| Error::Transport(format!("tcp accept: {e}")))?;
    client
        .set_nodelay(true)
        .map_err(|e| Error::Transport(format!("tcp nodelay: {e}")))?;
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        loop {
            let mut len = [0u8; 4];
            if server.read_exact(&mut len).is_err() {
                break;
            }
            let n = u32::from_le_bytes(len) as usize;
            let mut frame = Vec::with_capacity(n + 4);
            frame.extend(len);
            frame.resize(n + 4, 0);
            if server.read_exact(&mut frame[4..]).is_err() || tx.send(frame).is_err() {
                break;
            }
        }
    });
    Ok((Box::new(TcpSink(client)), rx))
}

impl Endpoint {
    pub fn actor(&self) -> Actor {
        self.actor
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    /// Sends `payload` to `to` and returns the assigned message id.
    pub fn send(
        &mut self,
        to: Actor,
        kind: MessageKind,
        batch_tag: Option<u64>,
        payload: Payload,
    ) -> Result<u64> {
        let sink = self
            .sinks
            .get_mut(&to)
            .ok_or_else(|| Error::Transport(format!("{} has no channel to {to}", self.actor)))?;
        let msg = ProtocolMessage {
            msg_id: self.counter.fetch_add(1, Ordering::SeqCst),
            sender: self.actor,
            receiver: to,
            kind,
            batch_tag,
            payload,
        };
        sink.send_frame(msg.encode()?)?;
        Ok(msg.msg_id)
    }

    /// Blocks for the next message from `from`, up to the timeout. Every
    /// delivered message is appended to the shared transcript.
    pub fn recv(&mut self, from: Actor) -> Result<ProtocolMessage> {
        let source = self
            .sources
            .get(&from)
            .ok_or_else(|| Error::Transport(format!("{} has no channel from {from}", self.actor)))?;
        let frame = match source.recv_timeout(self.timeout) {
            Ok(f) => f,
            Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Transport(format!("channel {from}→{} closed", self.actor)))
            }
        };
        let msg = ProtocolMessage::decode(&frame)?;
        if msg.sender != from || msg.receiver != self.actor {
            return Err(Error::Malformed(format!(
                "message {} routed {}→{} arrived on channel {from}→{}",
                msg.msg_id, msg.sender, msg.receiver, self.actor
            )));
        }
        if let Some(&last) = self.last_received.get(&from) {
            if msg.msg_id <= last {
                return Err(Error::Malformed(format!(
                    "msg id {} not above {last} on channel {from}→{}",
                    msg.msg_id, self.actor
                )));
            }
        }
        self.last_received.insert(from, msg.msg_id);
        self.transcript
            .lock()
            .expect("transcript lock")
            .push(msg.clone());
        Ok(msg)
    }

    /// Receives and checks the kind.
    pub fn expect(&mut self, from: Actor, kind: MessageKind) -> Result<ProtocolMessage> {
        let msg = self.recv(from)?;
        if msg.kind != kind {
            return Err(Error::UnexpectedMessage {
                expected: kind,
                actual: msg.kind,
                msg_id: msg.msg_id,
            });
        }
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor2;

    fn ids(v: &[u64]) -> Payload {
        Payload::Ids(v.to_vec())
    }

    #[test]
    fn fifo_and_roundtrip() {
        for backend in [Backend::InProcess, Backend::Tcp] {
            let mut net = connect(backend, Duration::from_secs(5)).unwrap();
            let m = Payload::Matrix(Tensor2::new(1, 3, vec![1.0, -2.0, 0.25]).unwrap());
            net.a.send(Actor::B, MessageKind::InferredBatch, Some(1), m.clone()).unwrap();
            net.a.send(Actor::B, MessageKind::Control, None, ids(&[5])).unwrap();
            let first = net.b.recv(Actor::A).unwrap();
            assert_eq!(first.payload, m);
            assert_eq!(first.batch_tag, Some(1));
            assert_eq!(net.b.recv(Actor::A).unwrap().payload, ids(&[5]));
            assert_eq!(net.transcript().len(), 2);
        }
    }

    #[test]
    fn timeout_and_closed_channel() {
        let mut net = connect(Backend::InProcess, Duration::from_millis(20)).unwrap();
        assert!(matches!(net.c.recv(Actor::A), Err(Error::Timeout(_))));
        let Endpoints { a, mut b, .. } = net;
        drop(a);
        assert!(matches!(b.recv(Actor::A), Err(Error::Transport(_))));
    }

    #[test]
    fn unexpected_kind() {
        let mut net = in_process();
        let id = net.a.send(Actor::C, MessageKind::Control, None, ids(&[])).unwrap();
        match net.c.expect(Actor::A, MessageKind::PartialSum) {
            Err(Error::UnexpectedMessage { msg_id, .. }) => assert_eq!(msg_id, id),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_checked_on_send() {
        let mut net = in_process();
        let err = net
            .a
            .send(Actor::B, MessageKind::CipherBlock, None, ids(&[1]))
            .unwrap_err();
        assert!(matches!(err, Error::Malformed(_)));
    }

    #[test]
    fn concurrent_actors() {
        let net = in_process();
        let Endpoints { mut a, mut b, .. } = net;
        let t = thread::spawn(move || {
            for i in 0..100u64 {
                a.send(Actor::B, MessageKind::Control, Some(i), ids(&[i])).unwrap();
            }
            a
        });
        for i in 0..100u64 {
            assert_eq!(b.recv(Actor::A).unwrap().payload, ids(&[i]));
        }
        t.join().unwrap();
    }
}
