//! Pairing session state machine.
//!
//! Message flow between initiator A and responder B:
//!
//! 1. `A -> B Hello(config)`, `B -> A Hello(ack)`
//! 2. `A -> B KeyCommit(H(pkA || n))`, `B -> A PubKey(pkB)`, `A -> B KeyReveal(pkA || n)`.
//!    Both derive `session_key = H("key" || Z || transcript)`.
//! 3. Once the out-of-band secret `S` is available, each side computes
//!    `chk = H("chk" || role || transcript || S)[..16]` and sends a commitment to it.
//! 4. After seeing the peer's commitment each side opens its own.
//! 5. An opening that does not match its commitment aborts; a valid opening
//!    with the wrong check value rejects; otherwise the session accepts.
//!
//! The transcript covers the key-exchange messages only (Hello through
//! KeyReveal), so both honest sides hold identical transcripts once they reach
//! the check phase.

use std::fmt;

#[cfg(any(test, feature = "toy-group"))]
use rand::Rng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coding::{ShortSecret, TimingParams};
use crate::model::PairingMethod;

pub const PROTOCOL_VERSION: u32 = 1;
/// Hash named in the Hello message.
pub const HASH_NAME: &str = "sha256";
pub const NONCE_LEN: usize = 16;
pub const CHECK_LEN: usize = 16;
pub const DIGEST_LEN: usize = 32;

pub const GROUP_X25519: &str = "x25519";
/// 31-bit toy group (p = 2^31 - 1, g = 7). Only registered in tests or with
/// the `toy-group` feature.
pub const GROUP_TOY31: &str = "toy31";

#[cfg(any(test, feature = "toy-group"))]
const TOY_PRIME: u64 = 2_147_483_647;
#[cfg(any(test, feature = "toy-group"))]
const TOY_GENERATOR: u64 = 7;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("unsupported key agreement group {0:?}")]
    UnsupportedGroup(String),
    #[error("unexpected {kind:?} message in phase {phase:?}")]
    OutOfOrderMessage { kind: MessageKind, phase: Phase },
    #[error("commitment opening does not match")]
    CommitmentOpenInvalid,
    #[error("malformed {0:?} payload")]
    MalformedPayload(MessageKind),
    #[error("peer configuration does not match: {0}")]
    ConfigMismatch(String),
    #[error("invalid peer public key")]
    InvalidPublicKey,
    #[error("short secret has {got} bits, expected {expected}")]
    SecretLength { expected: usize, got: usize },
    #[error("session already ended in {0:?}")]
    Terminal(Phase),
    #[error("peer aborted the session")]
    PeerAborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Initiator,
    Responder,
}

impl Role {
    /// Label mixed into transcripts and check values.
    pub fn label(self) -> &'static [u8] {
        match self {
            Role::Initiator => b"A",
            Role::Responder => b"B",
        }
    }

    pub fn peer(self) -> Role {
        match self {
            Role::Initiator => Role::Responder,
            Role::Responder => Role::Initiator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub role: Role,
    pub method: PairingMethod,
    pub timing: TimingParams,
    pub secret_bits: usize,
    pub group_id: String,
}

impl SessionConfig {
    pub fn new(role: Role, method: PairingMethod, timing: TimingParams, secret_bits: usize) -> Self {
        Self { role, method, timing, secret_bits, group_id: GROUP_X25519.to_string() }
    }

    pub fn with_group(mut self, group_id: &str) -> Self {
        self.group_id = group_id.to_string();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Hello,
    KeyExchange,
    OobWait,
    CheckCommit,
    CheckOpen,
    Accepted,
    Rejected,
    Aborted,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Accepted | Phase::Rejected | Phase::Aborted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Hello,
    KeyCommit,
    KeyReveal,
    PubKey,
    ChkCommit,
    ChkOpen,
    Result,
}

impl MessageKind {
    pub const ALL: [MessageKind; 7] = [
        MessageKind::Hello,
        MessageKind::KeyCommit,
        MessageKind::KeyReveal,
        MessageKind::PubKey,
        MessageKind::ChkCommit,
        MessageKind::ChkOpen,
        MessageKind::Result,
    ];

    fn tag(self) -> u8 {
        match self {
            MessageKind::Hello => 1,
            MessageKind::KeyCommit => 2,
            MessageKind::KeyReveal => 3,
            MessageKind::PubKey => 4,
            MessageKind::ChkCommit => 5,
            MessageKind::ChkOpen => 6,
            MessageKind::Result => 7,
        }
    }
}

/// Final verdict carried by a `Result` message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Reject = 0,
    Accept = 1,
    Abort = 2,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InBandMessage {
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

impl InBandMessage {
    pub fn new(kind: MessageKind, payload: Vec<u8>) -> Self {
        Self { kind, payload }
    }

    pub fn result(v: Verdict) -> Self {
        Self::new(MessageKind::Result, vec![v as u8])
    }

    /// Decodes a `Result` payload.
    pub fn verdict(&self) -> Option<Verdict> {
        match (self.kind, self.payload.as_slice()) {
            (MessageKind::Result, [0]) => Some(Verdict::Reject),
            (MessageKind::Result, [1]) => Some(Verdict::Accept),
            (MessageKind::Result, [2]) => Some(Verdict::Abort),
            _ => None,
        }
    }
}

impl fmt::Debug for InBandMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}({} bytes)", self.kind, self.payload.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Commitment(pub [u8; DIGEST_LEN]);

pub type Nonce = [u8; NONCE_LEN];
pub type CheckValue = [u8; CHECK_LEN];

pub fn commit<R: RngCore + ?Sized>(value: &[u8], rng: &mut R) -> (Commitment, Nonce) {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    (commitment_digest(value, &nonce), nonce)
}

pub fn verify_open(c: &Commitment, value: &[u8], nonce: &[u8]) -> bool {
    commitment_digest(value, nonce) == *c
}

fn commitment_digest(value: &[u8], nonce: &[u8]) -> Commitment {
    let mut h = Sha256::new();
    h.update(value);
    h.update(nonce);
    Commitment(h.finalize().into())
}

/// Check value one side derives from the shared transcript and the secret.
pub fn compute_check(transcript: &[u8], role: Role, s: &ShortSecret) -> CheckValue {
    let mut h = Sha256::new();
    h.update(b"chk");
    h.update(role.label());
    h.update(transcript);
    h.update(s.to_bytes());
    let digest: [u8; DIGEST_LEN] = h.finalize().into();
    let mut out = [0u8; CHECK_LEN];
    out.copy_from_slice(&digest[..CHECK_LEN]);
    out
}

fn derive_session_key(shared: &[u8], transcript: &[u8]) -> [u8; DIGEST_LEN] {
    let mut h = Sha256::new();
    h.update(b"key");
    h.update(shared);
    h.update(transcript);
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum KeyGroup {
    X25519,
    #[cfg(any(test, feature = "toy-group"))]
    Toy31,
}

impl KeyGroup {
    fn from_id(id: &str) -> Result<Self, ProtocolError> {
        match id {
            GROUP_X25519 => Ok(KeyGroup::X25519),
            #[cfg(any(test, feature = "toy-group"))]
            GROUP_TOY31 => Ok(KeyGroup::Toy31),
            other => Err(ProtocolError::UnsupportedGroup(other.to_string())),
        }
    }

    fn public_len(self) -> usize {
        match self {
            KeyGroup::X25519 => 32,
            #[cfg(any(test, feature = "toy-group"))]
            KeyGroup::Toy31 => 4,
        }
    }

    fn keypair<R: RngCore + ?Sized>(self, rng: &mut R) -> (Vec<u8>, Vec<u8>) {
        match self {
            KeyGroup::X25519 => {
                let mut bytes = [0u8; 32];
                rng.fill_bytes(&mut bytes);
                let secret = x25519_dalek::StaticSecret::from(bytes);
                let public = x25519_dalek::PublicKey::from(&secret);
                (secret.to_bytes().to_vec(), public.as_bytes().to_vec())
            }
            #[cfg(any(test, feature = "toy-group"))]
            KeyGroup::Toy31 => {
                let x = rng.random_range(2..TOY_PRIME - 1);
                let y = toy_pow(TOY_GENERATOR, x);
                (x.to_be_bytes().to_vec(), (y as u32).to_be_bytes().to_vec())
            }
        }
    }

    fn agree(self, secret: &[u8], peer: &[u8]) -> Result<Vec<u8>, ProtocolError> {
        if peer.len() != self.public_len() {
            return Err(ProtocolError::InvalidPublicKey);
        }
        match self {
            KeyGroup::X25519 => {
                let sk: [u8; 32] = secret.try_into().map_err(|_| ProtocolError::InvalidPublicKey)?;
                let pk: [u8; 32] = peer.try_into().map_err(|_| ProtocolError::InvalidPublicKey)?;
                let shared = x25519_dalek::StaticSecret::from(sk).diffie_hellman(&x25519_dalek::PublicKey::from(pk));
                if !shared.was_contributory() {
                    return Err(ProtocolError::InvalidPublicKey);
                }
                Ok(shared.as_bytes().to_vec())
            }
            #[cfg(any(test, feature = "toy-group"))]
            KeyGroup::Toy31 => {
                let x = u64::from_be_bytes(secret.try_into().map_err(|_| ProtocolError::InvalidPublicKey)?);
                let y = u64::from(u32::from_be_bytes(peer.try_into().map_err(|_| ProtocolError::InvalidPublicKey)?));
                if !(2..TOY_PRIME).contains(&y) {
                    return Err(ProtocolError::InvalidPublicKey);
                }
                Ok((toy_pow(y, x) as u32).to_be_bytes().to_vec())
            }
        }
    }
}

#[cfg(any(test, feature = "toy-group"))]
fn toy_pow(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1u64;
    base %= TOY_PRIME;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * base % TOY_PRIME;
        }
        base = base * base % TOY_PRIME;
        exp >>= 1;
    }
    acc
}

/// Body of a Hello message: the session configuration plus protocol metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloPayload {
    pub version: u32,
    pub hash: String,
    #[serde(flatten)]
    pub config: SessionConfig,
}

impl HelloPayload {
    pub fn decode(payload: &[u8]) -> Result<Self, ProtocolError> {
        serde_json::from_slice(payload).map_err(|_| ProtocolError::MalformedPayload(MessageKind::Hello))
    }
}

/// Inputs that drive a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionInput {
    /// Initiator only: emit the first Hello.
    Start,
    Message(InBandMessage),
    OobSecretReady(ShortSecret),
    Timeout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionState {
    config: SessionConfig,
    group: KeyGroup,
    phase: Phase,
    transcript: Vec<u8>,
    own_secret_key: Vec<u8>,
    own_public_key: Vec<u8>,
    peer_public_key: Option<Vec<u8>>,
    short_secret: Option<ShortSecret>,
    session_key: Option<[u8; DIGEST_LEN]>,
    key_nonce: Option<Nonce>,
    peer_key_commit: Option<Commitment>,
    own_check: Option<(CheckValue, Nonce)>,
    peer_check_commit: Option<Commitment>,
    started: bool,
    end_reason: Option<String>,
    rng: ChaCha20Rng,
}

/// Creates a fresh session with an ephemeral key pair.
pub fn init_session<R: RngCore + ?Sized>(cfg: SessionConfig, rng: &mut R) -> Result<SessionState, ProtocolError> {
    let group = KeyGroup::from_id(&cfg.group_id)?;
    if cfg.secret_bits == 0 || !cfg.secret_bits.is_multiple_of(crate::coding::BITS_PER_INTERVAL) {
        return Err(ProtocolError::SecretLength { expected: cfg.secret_bits, got: cfg.secret_bits });
    }
    let (own_secret_key, own_public_key) = group.keypair(rng);
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    Ok(SessionState {
        config: cfg,
        group,
        phase: Phase::Hello,
        transcript: Vec::new(),
        own_secret_key,
        own_public_key,
        peer_public_key: None,
        short_secret: None,
        session_key: None,
        key_nonce: None,
        peer_key_commit: None,
        own_check: None,
        peer_check_commit: None,
        started: false,
        end_reason: None,
        rng: ChaCha20Rng::from_seed(seed),
    })
}

impl SessionState {
    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.config.role
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_terminal(&self) -> bool {
        self.phase.is_terminal()
    }

    pub fn transcript(&self) -> &[u8] {
        &self.transcript
    }

    pub fn public_key(&self) -> &[u8] {
        &self.own_public_key
    }

    pub fn peer_public_key(&self) -> Option<&[u8]> {
        self.peer_public_key.as_deref()
    }

    pub fn short_secret(&self) -> Option<&ShortSecret> {
        self.short_secret.as_ref()
    }

    pub fn session_key(&self) -> Option<&[u8; DIGEST_LEN]> {
        self.session_key.as_ref()
    }

    /// Why the session ended, for terminal sessions.
    pub fn end_reason(&self) -> Option<&str> {
        self.end_reason.as_deref()
    }

    pub fn hello_payload(&self) -> HelloPayload {
        HelloPayload { version: PROTOCOL_VERSION, hash: HASH_NAME.to_string(), config: self.config.clone() }
    }

    /// Advances the session by one input.
    ///
    /// Errors other than [`ProtocolError::Terminal`] leave the session in
    /// [`Phase::Aborted`]; the caller may notify the peer with
    /// `InBandMessage::result(Verdict::Abort)`.
    pub fn step(&mut self, input: SessionInput) -> Result<Vec<InBandMessage>, ProtocolError> {
        if self.phase.is_terminal() {
            return match input {
                SessionInput::Message(m) if m.kind == MessageKind::Result => Ok(Vec::new()),
                _ => Err(ProtocolError::Terminal(self.phase)),
            };
        }
        let result = match input {
            SessionInput::Start => self.on_start(),
            SessionInput::Message(m) => self.on_message(m),
            SessionInput::OobSecretReady(s) => self.on_secret(s),
            SessionInput::Timeout => Ok(self.finish(Phase::Rejected, "timeout")),
        };
        if let Err(e) = &result {
            self.phase = Phase::Aborted;
            self.end_reason = Some(abort_reason(e).to_string());
        }
        result
    }

    fn on_start(&mut self) -> Result<Vec<InBandMessage>, ProtocolError> {
        if self.config.role != Role::Initiator || self.started || self.phase != Phase::Hello {
            return Err(ProtocolError::OutOfOrderMessage { kind: MessageKind::Hello, phase: self.phase });
        }
        self.started = true;
        let payload = serde_json::to_vec(&self.hello_payload()).expect("hello serializes");
        Ok(vec![self.send_recorded(MessageKind::Hello, payload)])
    }

    fn on_message(&mut self, m: InBandMessage) -> Result<Vec<InBandMessage>, ProtocolError> {
        use MessageKind as K;
        use Phase as P;
        let role = self.config.role;
        let out_of_order = ProtocolError::OutOfOrderMessage { kind: m.kind, phase: self.phase };
        match (m.kind, self.phase, role) {
            (K::Result, _, _) => match m.verdict() {
                Some(Verdict::Accept) => Ok(Vec::new()),
                Some(Verdict::Reject) => Ok(self.finish_silent(P::Rejected, "peer_rejected")),
                Some(Verdict::Abort) => Err(ProtocolError::PeerAborted),
                None => Err(ProtocolError::MalformedPayload(K::Result)),
            },
            (K::Hello, P::Hello, Role::Responder) => {
                self.check_hello(&m.payload)?;
                self.record(role.peer(), &m);
                let ack = serde_json::to_vec(&self.hello_payload()).expect("hello serializes");
                let reply = self.send_recorded(K::Hello, ack);
                self.phase = P::KeyExchange;
                Ok(vec![reply])
            }
            (K::Hello, P::Hello, Role::Initiator) if self.started => {
                self.check_hello(&m.payload)?;
                self.record(role.peer(), &m);
                let pk = self.own_public_key.clone();
                let (c, nonce) = commit(&pk, &mut self.rng);
                self.key_nonce = Some(nonce);
                let msg = self.send_recorded(K::KeyCommit, c.0.to_vec());
                self.phase = P::KeyExchange;
                Ok(vec![msg])
            }
            (K::KeyCommit, P::KeyExchange, Role::Responder) if self.peer_key_commit.is_none() => {
                let digest: [u8; DIGEST_LEN] =
                    m.payload.as_slice().try_into().map_err(|_| ProtocolError::MalformedPayload(K::KeyCommit))?;
                self.peer_key_commit = Some(Commitment(digest));
                self.record(role.peer(), &m);
                let pk = self.own_public_key.clone();
                Ok(vec![self.send_recorded(K::PubKey, pk)])
            }
            (K::PubKey, P::KeyExchange, Role::Initiator) if self.peer_public_key.is_none() => {
                if m.payload.len() != self.group.public_len() {
                    return Err(ProtocolError::MalformedPayload(K::PubKey));
                }
                self.record(role.peer(), &m);
                self.peer_public_key = Some(m.payload.clone());
                let nonce = self.key_nonce.expect("key commitment was sent");
                let mut reveal = self.own_public_key.clone();
                reveal.extend_from_slice(&nonce);
                let msg = self.send_recorded(K::KeyReveal, reveal);
                self.derive_key()?;
                Ok(vec![msg])
            }
            (K::KeyReveal, P::KeyExchange, Role::Responder) if self.peer_key_commit.is_some() => {
                let pk_len = self.group.public_len();
                if m.payload.len() != pk_len + NONCE_LEN {
                    return Err(ProtocolError::MalformedPayload(K::KeyReveal));
                }
                let (pk, nonce) = m.payload.split_at(pk_len);
                let c = self.peer_key_commit.expect("checked in guard");
                if !verify_open(&c, pk, nonce) {
                    return Err(ProtocolError::CommitmentOpenInvalid);
                }
                self.peer_public_key = Some(pk.to_vec());
                self.record(role.peer(), &m);
                self.derive_key()?;
                Ok(Vec::new())
            }
            (K::ChkCommit, P::OobWait | P::CheckCommit, _) if self.peer_check_commit.is_none() => {
                let digest: [u8; DIGEST_LEN] =
                    m.payload.as_slice().try_into().map_err(|_| ProtocolError::MalformedPayload(K::ChkCommit))?;
                self.peer_check_commit = Some(Commitment(digest));
                if self.phase == P::CheckCommit {
                    Ok(vec![self.open_check()])
                } else {
                    Ok(Vec::new())
                }
            }
            (K::ChkOpen, P::CheckOpen, _) => self.on_check_open(&m.payload),
            _ => Err(out_of_order),
        }
    }

    fn on_secret(&mut self, s: ShortSecret) -> Result<Vec<InBandMessage>, ProtocolError> {
        if self.phase != Phase::OobWait {
            return Err(ProtocolError::OutOfOrderMessage { kind: MessageKind::ChkCommit, phase: self.phase });
        }
        if s.len() != self.config.secret_bits {
            return Err(ProtocolError::SecretLength { expected: self.config.secret_bits, got: s.len() });
        }
        let chk = compute_check(&self.transcript, self.config.role, &s);
        let (c, nonce) = commit(&chk, &mut self.rng);
        self.short_secret = Some(s);
        self.own_check = Some((chk, nonce));
        self.phase = Phase::CheckCommit;
        let mut out = vec![InBandMessage::new(MessageKind::ChkCommit, c.0.to_vec())];
        if self.peer_check_commit.is_some() {
            out.push(self.open_check());
        }
        Ok(out)
    }

    fn open_check(&mut self) -> InBandMessage {
        let (chk, nonce) = self.own_check.expect("own check computed before opening");
        self.phase = Phase::CheckOpen;
        let mut payload = chk.to_vec();
        payload.extend_from_slice(&nonce);
        InBandMessage::new(MessageKind::ChkOpen, payload)
    }

    fn on_check_open(&mut self, payload: &[u8]) -> Result<Vec<InBandMessage>, ProtocolError> {
        if payload.len() != CHECK_LEN + NONCE_LEN {
            return Err(ProtocolError::MalformedPayload(MessageKind::ChkOpen));
        }
        let (value, nonce) = payload.split_at(CHECK_LEN);
        let c = self.peer_check_commit.expect("opening only accepted after commitment");
        if !verify_open(&c, value, nonce) {
            return Err(ProtocolError::CommitmentOpenInvalid);
        }
        let s = self.short_secret.as_ref().expect("secret known in check phase");
        let expected = compute_check(&self.transcript, self.config.role.peer(), s);
        if value == expected {
            Ok(self.finish(Phase::Accepted, "check_match"))
        } else {
            Ok(self.finish(Phase::Rejected, "check_mismatch"))
        }
    }

    fn check_hello(&self, payload: &[u8]) -> Result<(), ProtocolError> {
        let hello = HelloPayload::decode(payload)?;
        let mine = &self.config;
        let theirs = &hello.config;
        let mismatch = |what: &str| Err(ProtocolError::ConfigMismatch(what.to_string()));
        if hello.version != PROTOCOL_VERSION {
            return mismatch("version");
        }
        if hello.hash != HASH_NAME {
            return mismatch("hash");
        }
        if theirs.role != mine.role.peer() {
            return mismatch("role");
        }
        if theirs.method != mine.method {
            return mismatch("method");
        }
        if theirs.secret_bits != mine.secret_bits {
            return mismatch("secret_bits");
        }
        if theirs.timing != mine.timing {
            return mismatch("timing");
        }
        if theirs.group_id != mine.group_id {
            return mismatch("group_id");
        }
        Ok(())
    }

    fn derive_key(&mut self) -> Result<(), ProtocolError> {
        let peer = self.peer_public_key.as_ref().expect("peer key stored");
        let shared = self.group.agree(&self.own_secret_key, peer)?;
        self.session_key = Some(derive_session_key(&shared, &self.transcript));
        self.phase = Phase::OobWait;
        Ok(())
    }

    fn record(&mut self, sender: Role, m: &InBandMessage) {
        self.transcript.extend_from_slice(sender.label());
        self.transcript.push(m.kind.tag());
        self.transcript.extend_from_slice(&(m.payload.len() as u32).to_be_bytes());
        self.transcript.extend_from_slice(&m.payload);
    }

    fn send_recorded(&mut self, kind: MessageKind, payload: Vec<u8>) -> InBandMessage {
        let m = InBandMessage::new(kind, payload);
        self.record(self.config.role, &m);
        m
    }

    fn finish(&mut self, phase: Phase, reason: &str) -> Vec<InBandMessage> {
        self.finish_silent(phase, reason);
        let verdict = match phase {
            Phase::Accepted => Verdict::Accept,
            Phase::Rejected => Verdict::Reject,
            _ => Verdict::Abort,
        };
        vec![InBandMessage::result(verdict)]
    }

    fn finish_silent(&mut self, phase: Phase, reason: &str) -> Vec<InBandMessage> {
        self.phase = phase;
        self.end_reason = Some(reason.to_string());
        Vec::new()
    }
}

fn abort_reason(e: &ProtocolError) -> &'static str {
    match e {
        ProtocolError::UnsupportedGroup(_) => "unsupported_group",
        ProtocolError::OutOfOrderMessage { .. } => "out_of_order",
        ProtocolError::CommitmentOpenInvalid => "commitment_open_invalid",
        ProtocolError::MalformedPayload(_) => "malformed_payload",
        ProtocolError::ConfigMismatch(_) => "config_mismatch",
        ProtocolError::InvalidPublicKey => "invalid_public_key",
        ProtocolError::SecretLength { .. } => "secret_length",
        ProtocolError::Terminal(_) => "terminal",
        ProtocolError::PeerAborted => "peer_aborted",
    }
}
