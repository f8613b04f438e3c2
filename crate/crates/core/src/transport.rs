//! In-band channels: a virtual-time loopback for simulation, a TCP link for
//! two-machine runs, and a man-in-the-middle relay over TCP.
//!
//! Frames on every channel use the same wire form: a 4-byte big-endian length
//! followed by a UTF-8 JSON object `{"kind", "payload" (base64), "session"}`.

use std::collections::{HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actors::{Adversary, AdversaryConfig, Side};
use crate::engine::VirtualClock;
use crate::oob::{OobLink, OobMessage};
use crate::protocol::{InBandMessage, MessageKind, Verdict};

/// Largest JSON body a frame may carry.
pub const MAX_FRAME: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("receive timed out")]
    Timeout,
    #[error("connection refused: {0}")]
    ConnectRefused(String),
    #[error("frame of {0} bytes exceeds the 64 KiB limit")]
    FrameTooLarge(usize),
    #[error("peer closed the connection")]
    PeerClosed,
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe => TransportError::PeerClosed,
            io::ErrorKind::ConnectionRefused => TransportError::ConnectRefused(e.to_string()),
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Timeout,
            _ => TransportError::Io(e.to_string()),
        }
    }
}

/// A protocol message tagged with the session it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub session: String,
    pub message: InBandMessage,
}

impl Frame {
    pub fn new(session: impl Into<String>, message: InBandMessage) -> Self {
        Self { session: session.into(), message }
    }
}

#[derive(Serialize, Deserialize)]
struct WireFrame<'a> {
    kind: MessageKind,
    payload: String,
    #[serde(borrow)]
    session: std::borrow::Cow<'a, str>,
}

/// Length-prefixed wire bytes of a frame.
pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, TransportError> {
    let wire =
        WireFrame { kind: f.message.kind, payload: BASE64.encode(&f.message.payload), session: std::borrow::Cow::Borrowed(&f.session) };
    let body = serde_json::to_vec(&wire).map_err(|e| TransportError::Malformed(e.to_string()))?;
    if body.len() > MAX_FRAME {
        return Err(TransportError::FrameTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Parses one complete length-prefixed frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, TransportError> {
    if bytes.len() < 4 {
        return Err(TransportError::Malformed("missing length prefix".into()));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME {
        return Err(TransportError::FrameTooLarge(len));
    }
    if bytes.len() - 4 != len {
        return Err(TransportError::Malformed(format!("length prefix {len} but {} body bytes", bytes.len() - 4)));
    }
    decode_body(&bytes[4..])
}

fn decode_body(body: &[u8]) -> Result<Frame, TransportError> {
    let wire: WireFrame<'_> = serde_json::from_slice(body).map_err(|e| TransportError::Malformed(e.to_string()))?;
    let payload = BASE64.decode(wire.payload.as_bytes()).map_err(|e| TransportError::Malformed(e.to_string()))?;
    Ok(Frame { session: wire.session.into_owned(), message: InBandMessage::new(wire.kind, payload) })
}

pub fn write_frame<W: Write>(w: &mut W, f: &Frame) -> Result<(), TransportError> {
    let bytes = encode_frame(f)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, TransportError> {
    let mut prefix = [0u8; 4];
    r.read_exact(&mut prefix)?;
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME {
        return Err(TransportError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_body(&body)
}

/// Latency and loss of a simulated radio link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileRepr", into = "ProfileRepr")]
pub struct LinkProfile {
    pub latency_ms: u64,
    pub loss: f64,
}

impl LinkProfile {
    pub const LOOPBACK: LinkProfile = LinkProfile { latency_ms: 5, loss: 0.0 };
    pub const BLUETOOTH: LinkProfile = LinkProfile { latency_ms: 40, loss: 0.0 };
    pub const WIFI: LinkProfile = LinkProfile { latency_ms: 10, loss: 0.0 };

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "loopback" => Some(Self::LOOPBACK),
            "bluetooth" => Some(Self::BLUETOOTH),
            "wifi" => Some(Self::WIFI),
            _ => None,
        }
    }

    fn name(&self) -> Option<&'static str> {
        [("loopback", Self::LOOPBACK), ("bluetooth", Self::BLUETOOTH), ("wifi", Self::WIFI)]
            .into_iter()
            .find(|(_, p)| p == self)
            .map(|(n, _)| n)
    }

    pub fn with_loss(mut self, loss: f64) -> Self {
        self.loss = loss;
        self
    }
}

impl Default for LinkProfile {
    fn default() -> Self {
        Self::LOOPBACK
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ProfileRepr {
    Named(String),
    Custom {
        latency_ms: u64,
        #[serde(default)]
        loss: f64,
    },
}

impl TryFrom<ProfileRepr> for LinkProfile {
    type Error = String;

    fn try_from(r: ProfileRepr) -> Result<Self, Self::Error> {
        match r {
            ProfileRepr::Named(n) => LinkProfile::named(&n).ok_or_else(|| format!("unknown transport profile {n:?}")),
            ProfileRepr::Custom { latency_ms, loss } if (0.0..=1.0).contains(&loss) => Ok(LinkProfile { latency_ms, loss }),
            ProfileRepr::Custom { .. } => Err("loss must lie in [0, 1]".into()),
        }
    }
}

impl From<LinkProfile> for ProfileRepr {
    fn from(p: LinkProfile) -> Self {
        match p.name() {
            Some(n) => ProfileRepr::Named(n.to_string()),
            None => ProfileRepr::Custom { latency_ms: p.latency_ms, loss: p.loss },
        }
    }
}

/// A bidirectional frame channel owned by one session.
pub trait Endpoint {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError>;
    fn receive(&mut self, timeout_ms: u64) -> Result<Frame, TransportError>;
}

type Queue = Arc<Mutex<VecDeque<(u64, Vec<u8>)>>>;

/// One end of a simulated link. Frames become visible `latency_ms` of
/// virtual time after they are sent.
#[derive(Debug)]
pub struct LoopbackEndpoint {
    clock: VirtualClock,
    profile: LinkProfile,
    outbox: Queue,
    inbox: Queue,
    loss_rng: ChaCha20Rng,
}

/// Two connected endpoints on a fresh virtual clock.
pub fn loopback_pair(profile: LinkProfile) -> (LoopbackEndpoint, LoopbackEndpoint) {
    loopback_pair_on(profile, &VirtualClock::new(), 0)
}

/// Two connected endpoints sharing `clock`; `seed` drives the loss model.
pub fn loopback_pair_on(profile: LinkProfile, clock: &VirtualClock, seed: u64) -> (LoopbackEndpoint, LoopbackEndpoint) {
    let ab: Queue = Arc::default();
    let ba: Queue = Arc::default();
    let mk = |outbox: &Queue, inbox: &Queue, stream: u64| LoopbackEndpoint {
        clock: clock.clone(),
        profile,
        outbox: outbox.clone(),
        inbox: inbox.clone(),
        loss_rng: ChaCha20Rng::seed_from_u64(seed.wrapping_mul(2).wrapping_add(stream)),
    };
    (mk(&ab, &ba, 0), mk(&ba, &ab, 1))
}

impl LoopbackEndpoint {
    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    /// Virtual time the next inbound frame becomes available.
    pub fn next_arrival(&self) -> Option<u64> {
        self.inbox.lock().expect("queue lock").front().map(|(t, _)| *t)
    }

    /// Pops the next inbound frame if it has arrived by the current virtual time.
    pub fn try_receive(&mut self) -> Option<Result<Frame, TransportError>> {
        let now = self.clock.now_ms();
        let mut inbox = self.inbox.lock().expect("queue lock");
        match inbox.front() {
            Some((t, _)) if *t <= now => inbox.pop_front().map(|(_, b)| decode_frame(&b)),
            _ => None,
        }
    }
}

impl Endpoint for LoopbackEndpoint {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        let bytes = encode_frame(frame)?;
        if self.profile.loss > 0.0 && self.loss_rng.random::<f64>() < self.profile.loss {
            return Ok(());
        }
        let at = self.clock.now_ms() + self.profile.latency_ms;
        self.outbox.lock().expect("queue lock").push_back((at, bytes));
        Ok(())
    }

    fn receive(&mut self, timeout_ms: u64) -> Result<Frame, TransportError> {
        let deadline = self.clock.now_ms() + timeout_ms;
        match self.next_arrival() {
            Some(t) if t <= deadline => {
                self.clock.advance_to(t);
                self.try_receive().expect("frame is due")
            }
            _ => {
                self.clock.advance_to(deadline);
                Err(TransportError::Timeout)
            }
        }
    }
}

/// How to establish a TCP link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkMode {
    Listen(u16),
    Connect(String),
}

/// Framed channel over a TCP stream. A reader thread decodes inbound frames
/// in order; sends write directly from the owner.
#[derive(Debug)]
pub struct TcpEndpoint {
    writer: TcpStream,
    inbound: Receiver<Result<Frame, TransportError>>,
    reader: Option<JoinHandle<()>>,
}

pub fn tcp_link(mode: LinkMode) -> Result<TcpEndpoint, TransportError> {
    match mode {
        LinkMode::Listen(port) => {
            let listener = TcpListener::bind(("0.0.0.0", port))?;
            TcpEndpoint::accept(&listener)
        }
        LinkMode::Connect(addr) => TcpEndpoint::connect(&addr),
    }
}

impl TcpEndpoint {
    pub fn accept(listener: &TcpListener) -> Result<Self, TransportError> {
        let (stream, _) = listener.accept()?;
        Self::from_stream(stream)
    }

    pub fn connect(addr: &str) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr).map_err(|e| match e.kind() {
            io::ErrorKind::ConnectionRefused => TransportError::ConnectRefused(addr.to_string()),
            _ => TransportError::from(e),
        })?;
        Self::from_stream(stream)
    }

    /// Retries refused connections until `wait` elapses.
    pub fn connect_retry(addr: &str, wait: Duration) -> Result<Self, TransportError> {
        let start = Instant::now();
        loop {
            match Self::connect(addr) {
                Err(TransportError::ConnectRefused(_)) if start.elapsed() < wait => {
                    thread::sleep(Duration::from_millis(50));
                }
                other => return other,
            }
        }
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        let mut reader = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        let handle = thread::spawn(move || pump_frames(&mut reader, &tx));
        Ok(Self { writer: stream, inbound: rx, reader: Some(handle) })
    }

    pub fn peer_addr(&self) -> Option<SocketAddr> {
        self.writer.peer_addr().ok()
    }

    /// Closes both directions.
    pub fn close(&mut self) {
        let _ = self.writer.shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

fn pump_frames(reader: &mut TcpStream, tx: &Sender<Result<Frame, TransportError>>) {
    loop {
        let r = read_frame(reader);
        let stop = r.is_err();
        if tx.send(r).is_err() || stop {
            return;
        }
    }
}

impl Endpoint for TcpEndpoint {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        write_frame(&mut self.writer, frame)
    }

    fn receive(&mut self, timeout_ms: u64) -> Result<Frame, TransportError> {
        match self.inbound.recv_timeout(Duration::from_millis(timeout_ms)) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::PeerClosed),
        }
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        let _ = self.writer.shutdown(Shutdown::Both);
    }
}

/// What the relay saw of one pairing session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelaySession {
    pub session: String,
    pub verdict_a: Option<Verdict>,
    pub verdict_b: Option<Verdict>,
    /// Session key the adversary shares with each side, hex encoded.
    pub adversary_key_a: Option<String>,
    pub adversary_key_b: Option<String>,
}

impl RelaySession {
    /// An honest endpoint accepted while the relay had substituted keys.
    pub fn breached(&self, cfg: &AdversaryConfig) -> bool {
        cfg.kind.substitutes_keys() && (self.verdict_a == Some(Verdict::Accept) || self.verdict_b == Some(Verdict::Accept))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RelayReport {
    pub sessions: Vec<RelaySession>,
}

/// A running relay; `join` waits for both sides to disconnect.
pub struct RelayHandle {
    addr: SocketAddr,
    oob_addr: Option<SocketAddr>,
    thread: JoinHandle<Result<RelayReport, TransportError>>,
}

impl RelayHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn oob_addr(&self) -> Option<SocketAddr> {
        self.oob_addr
    }

    pub fn join(self) -> Result<RelayReport, TransportError> {
        self.thread.join().unwrap_or_else(|_| Err(TransportError::Io("relay thread panicked".into())))
    }
}

/// Optional tap on the out-of-band link: frames from `listener` are forwarded
/// to `forward` and, for eavesdroppers, decoded into the secret.
pub struct OobTap {
    pub listener: TcpListener,
    pub forward: String,
}

enum RelayEvent {
    InBand(Side, Result<Frame, TransportError>),
    Oob(Result<OobMessage, TransportError>),
}

/// Accepts one initiator connection on `listener`, dials `forward` and passes
/// every frame through the adversary. Each session id gets its own adversary.
pub fn mitm_relay(
    listener: TcpListener,
    forward: impl ToSocketAddrs + Send + 'static,
    cfg: AdversaryConfig,
    seed: u64,
    oob: Option<OobTap>,
) -> Result<RelayHandle, TransportError> {
    let addr = listener.local_addr()?;
    let oob_addr = oob.as_ref().map(|t| t.listener.local_addr()).transpose()?;
    let thread = thread::spawn(move || run_relay(listener, forward, cfg, seed, oob));
    Ok(RelayHandle { addr, oob_addr, thread })
}

fn run_relay(
    listener: TcpListener,
    forward: impl ToSocketAddrs,
    cfg: AdversaryConfig,
    seed: u64,
    oob: Option<OobTap>,
) -> Result<RelayReport, TransportError> {
    let (a_stream, _) = listener.accept()?;
    let fwd_addr = forward.to_socket_addrs()?.next().ok_or_else(|| TransportError::ConnectRefused("no address".into()))?;
    let b_stream = TcpStream::connect(fwd_addr)?;
    a_stream.set_nodelay(true)?;
    b_stream.set_nodelay(true)?;
    let mut a_writer = a_stream.try_clone()?;
    let mut b_writer = b_stream.try_clone()?;
    let (tx, rx) = mpsc::channel::<RelayEvent>();
    for (side, stream) in [(Side::A, a_stream), (Side::B, b_stream)] {
        let tx = tx.clone();
        let mut stream = stream;
        thread::spawn(move || loop {
            let r = read_frame(&mut stream);
            let stop = r.is_err();
            if tx.send(RelayEvent::InBand(side, r)).is_err() || stop {
                return;
            }
        });
    }
    if let Some(tap) = oob {
        let (client, _) = tap.listener.accept()?;
        let upstream = TcpStream::connect(&tap.forward)?;
        // Out-of-band traffic may flow either way; forward both directions.
        for (from, to) in [(client.try_clone()?, upstream.try_clone()?), (upstream, client)] {
            let tx = tx.clone();
            thread::spawn(move || {
                let mut from = OobLink::new(from);
                let mut to = OobLink::new(to);
                loop {
                    let r = from.recv_blocking();
                    if let Ok(m) = &r {
                        if to.send(m).is_err() {
                            return;
                        }
                    }
                    let stop = r.is_err();
                    if tx.send(RelayEvent::Oob(r)).is_err() || stop {
                        return;
                    }
                }
            });
        }
    }
    drop(tx);

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut adversaries: HashMap<String, Adversary> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut closed = [false, false];
    while !(closed[0] && closed[1]) {
        let Ok(event) = rx.recv() else { break };
        let (session, routed) = match event {
            RelayEvent::InBand(side, Ok(frame)) => {
                let adv = adversaries.entry(frame.session.clone()).or_insert_with(|| {
                    order.push(frame.session.clone());
                    Adversary::new(cfg, &mut rng)
                });
                (frame.session, adv.mitm_transform(side, frame.message))
            }
            RelayEvent::InBand(side, Err(_)) => {
                closed[side as usize] = true;
                // One side gone: close the other so its session sees PeerClosed.
                let _ = a_writer.shutdown(Shutdown::Write);
                let _ = b_writer.shutdown(Shutdown::Write);
                continue;
            }
            RelayEvent::Oob(Ok(msg)) => {
                let Some(adv) = adversaries.get_mut(msg.session()) else { continue };
                let out = match &msg {
                    OobMessage::Signals { schedule, .. } => adv.observe_signals(schedule),
                    OobMessage::Presses { trace, .. } => adv.observe_btb_presses(trace),
                };
                (msg.session().to_string(), out)
            }
            RelayEvent::Oob(Err(_)) => continue,
        };
        for r in routed {
            let writer = match r.to {
                Side::A => &mut a_writer,
                Side::B => &mut b_writer,
            };
            // A write failure shows up as a closed side on the reader.
            let _ = write_frame(writer, &Frame::new(session.clone(), r.message));
        }
    }
    let sessions = order
        .into_iter()
        .map(|id| {
            let adv = &adversaries[&id];
            RelaySession {
                verdict_a: adv.honest_verdict(Side::A),
                verdict_b: adv.honest_verdict(Side::B),
                adversary_key_a: adv.leg_session_key(Side::A).map(hex),
                adversary_key_b: adv.leg_session_key(Side::B).map(hex),
                session: id,
            }
        })
        .collect();
    Ok(RelayReport { sessions })
}

fn hex(bytes: [u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(kind: MessageKind, payload: Vec<u8>) -> Frame {
        Frame::new("s1", InBandMessage::new(kind, payload))
    }

    #[test]
    fn wire_form_is_length_prefixed_json() {
        let f = frame(MessageKind::KeyCommit, vec![0xff; 3]);
        let bytes = encode_frame(&f).unwrap();
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(len, bytes.len() - 4);
        let v: serde_json::Value = serde_json::from_slice(&bytes[4..]).unwrap();
        assert_eq!(v["kind"], "key_commit");
        assert_eq!(v["payload"], "////");
        assert_eq!(v["session"], "s1");
        assert_eq!(decode_frame(&bytes).unwrap(), f);
    }

    #[test]
    fn oversized_frames_are_refused() {
        let f = frame(MessageKind::Hello, vec![0; 128 * 1024]);
        assert!(matches!(encode_frame(&f), Err(TransportError::FrameTooLarge(_))));
        let mut bogus = ((MAX_FRAME + 1) as u32).to_be_bytes().to_vec();
        bogus.extend(vec![b' '; MAX_FRAME + 1]);
        assert!(matches!(decode_frame(&bogus), Err(TransportError::FrameTooLarge(_))));
    }

    #[test]
    fn loopback_delivers_after_latency() {
        let (mut a, mut b) = loopback_pair(LinkProfile::BLUETOOTH);
        let f = frame(MessageKind::PubKey, vec![1, 2, 3]);
        a.send(&f).unwrap();
        assert_eq!(b.next_arrival(), Some(40));
        assert!(b.try_receive().is_none());
        assert_eq!(b.receive(1_000).unwrap(), f);
        assert_eq!(b.clock().now_ms(), 40);
    }

    #[test]
    fn loopback_preserves_fifo_order() {
        let (mut a, mut b) = loopback_pair(LinkProfile::LOOPBACK);
        for i in 0..10u8 {
            a.send(&frame(MessageKind::Result, vec![i])).unwrap();
        }
        for i in 0..10u8 {
            assert_eq!(b.receive(100).unwrap().message.payload, vec![i]);
        }
    }

    #[test]
    fn lossy_link_times_out() {
        let (mut a, mut b) = loopback_pair(LinkProfile::LOOPBACK.with_loss(1.0));
        a.send(&frame(MessageKind::Hello, vec![])).unwrap();
        assert_eq!(b.receive(500), Err(TransportError::Timeout));
        assert_eq!(b.clock().now_ms(), 500);
    }

    #[test]
    fn profile_serde() {
        assert_eq!(serde_json::to_string(&LinkProfile::WIFI).unwrap(), "\"wifi\"");
        let p: LinkProfile = serde_json::from_str(r#"{"latency_ms": 7, "loss": 0.5}"#).unwrap();
        assert_eq!(p, LinkProfile { latency_ms: 7, loss: 0.5 });
        assert!(serde_json::from_str::<LinkProfile>("\"zigbee\"").is_err());
    }
}
