//! Discrete-event trial execution on a virtual clock.
//!
//! A trial wires the initiator and responder sessions through loopback
//! endpoints (with the adversary relay in between when one is configured),
//! plays the out-of-band phase through the human model, and classifies the
//! result against ground truth the devices themselves cannot see.

use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{SecondsFormat, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actors::{simulate_btb, simulate_presses, Adversary, AdversaryKind, HumanModel, HumanSpec, Routed, Side};
use crate::coding::{
    decode_presses, encode_schedule, quantize_btb, random_secret, PressTrace, ShortSecret, SignalSchedule, BITS_PER_INTERVAL,
};
use crate::model::{validate_scenario, CapabilitySet, ModelError, PairingMethod, Scenario};
use crate::protocol::{
    init_session, InBandMessage, MessageKind, Phase, ProtocolError, Role, SessionConfig, SessionInput, SessionState, Verdict,
};
use crate::transport::{loopback_pair_on, Endpoint, Frame, LoopbackEndpoint};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("scenario {name:?} is invalid: {source}")]
    ScenarioInvalid { name: String, source: ModelError },
    #[error("scenario {0:?} needs a scripted human model for headless runs")]
    NotHeadless(String),
    #[error("session setup failed: {0}")]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad log line {line}: {source}")]
    BadLogLine { line: usize, source: serde_json::Error },
}

/// Shared, monotonically nondecreasing virtual time in milliseconds.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_ms(&self) -> u64 {
        self.now.load(Ordering::Acquire)
    }

    /// Moves the clock forward to `t`; earlier times are ignored.
    pub fn advance_to(&self, t: u64) {
        self.now.fetch_max(t, Ordering::AcqRel);
    }
}

struct Entry<E> {
    at: u64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        // Reversed: BinaryHeap is a max-heap.
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Timestamp-ordered queue; ties pop in insertion order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self { heap: BinaryHeap::new(), next_seq: 0 }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, at: u64, event: E) {
        self.heap.push(Entry { at, seq: self.next_seq, event });
        self.next_seq += 1;
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|e| e.at)
    }

    pub fn pop(&mut self) -> Option<(u64, E)> {
        self.heap.pop().map(|e| (e.at, e.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Per-trial seed for repetition `rep` of scenario `index`.
pub fn trial_seed(master_seed: u64, index: u64, rep: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_be_bytes());
    h.update(index.to_be_bytes());
    h.update(rep.to_be_bytes());
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

fn sub_rng(seed: u64, label: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Independent random streams for one trial. Remote peers derive the same
/// streams so a seeded trial behaves alike over any transport.
pub struct TrialRngs {
    pub initiator: ChaCha20Rng,
    pub responder: ChaCha20Rng,
    pub adversary: ChaCha20Rng,
    pub secret: ChaCha20Rng,
    pub human: ChaCha20Rng,
    pub link: u64,
}

impl TrialRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            initiator: sub_rng(seed, "initiator"),
            responder: sub_rng(seed, "responder"),
            adversary: sub_rng(seed, "adversary"),
            secret: sub_rng(seed, "secret"),
            human: sub_rng(seed, "human"),
            link: seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    SafeError,
    FatalError,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialMode {
    #[default]
    Headless,
    Interactive,
    Remote,
}

/// Facts only the harness knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruth {
    /// An adversary ran its own key exchange with the honest devices.
    pub keys_substituted: bool,
    /// Whether both devices ended up holding the same short secret; `None`
    /// if at least one never obtained one.
    pub secrets_equal: Option<bool>,
}

/// Terminal view of one device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terminal<'a> {
    pub phase: Phase,
    pub reason: Option<&'a str>,
}

pub fn classify_outcome(truth: GroundTruth, a: Terminal<'_>, b: Terminal<'_>) -> (Outcome, String) {
    let any_accept = a.phase == Phase::Accepted || b.phase == Phase::Accepted;
    let both_accept = a.phase == Phase::Accepted && b.phase == Phase::Accepted;
    if any_accept && truth.keys_substituted {
        return (Outcome::FatalError, "accepted_under_attack".into());
    }
    if any_accept && truth.secrets_equal == Some(false) {
        return (Outcome::FatalError, "accepted_mismatched_secrets".into());
    }
    if both_accept {
        return (Outcome::Success, "paired".into());
    }
    if a.phase == Phase::Aborted || b.phase == Phase::Aborted {
        let both = [a, b];
        let reason = both
            .iter()
            .find(|t| t.phase == Phase::Aborted && t.reason != Some("peer_aborted"))
            .or_else(|| both.iter().find(|t| t.phase == Phase::Aborted))
            .and_then(|t| t.reason)
            .unwrap_or("aborted");
        return (Outcome::Abort, reason.to_string());
    }
    if truth.keys_substituted {
        return (Outcome::Abort, "attack_rejected".into());
    }
    let reasons = [a.reason, b.reason];
    let detail = if reasons.contains(&Some("trial_timeout")) {
        "trial_timeout"
    } else if reasons.contains(&Some("timeout")) {
        "timeout"
    } else if reasons.contains(&Some("check_mismatch")) {
        "check_mismatch"
    } else if any_accept {
        "one_sided_accept"
    } else {
        "rejected"
    };
    (Outcome::SafeError, detail.into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_ms: u64,
    pub actor: String,
    pub event: String,
}

/// One logged pairing attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub wall_time: String,
    pub scenario_name: String,
    pub method: PairingMethod,
    pub duration_ms: u64,
    pub outcome: Outcome,
    pub outcome_detail: String,
    pub secret_bits: usize,
    pub capabilities_a: CapabilitySet,
    pub capabilities_b: CapabilitySet,
    pub adversary: AdversaryKind,
    pub seed: u64,
    #[serde(default)]
    pub mode: TrialMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_a: Option<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_b: Option<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<SignalSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presses_a: Option<PressTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presses_b: Option<PressTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceEvent>>,
}

impl TrialRecord {
    /// Record skeleton for `s`; outcome fields are filled in by the caller.
    pub fn for_scenario(s: &Scenario, seed: u64, mode: TrialMode) -> Self {
        Self {
            wall_time: now_iso8601(),
            scenario_name: s.name.clone(),
            method: s.method,
            duration_ms: 0,
            outcome: Outcome::Abort,
            outcome_detail: String::new(),
            secret_bits: s.secret_bits,
            capabilities_a: s.device_a.capabilities.clone(),
            capabilities_b: s.device_b.capabilities.clone(),
            adversary: s.adversary.kind,
            seed,
            mode,
            phase_a: None,
            phase_b: None,
            schedule: None,
            presses_a: None,
            presses_b: None,
            trace: None,
        }
    }

    /// JSON with `wall_time` blanked, for determinism comparisons.
    pub fn without_wall_time(&self) -> Self {
        Self { wall_time: String::new(), ..self.clone() }
    }
}

pub fn now_iso8601() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Append-only sequence of trial records; serialized as JSON Lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    records: Vec<TrialRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, r: TrialRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, EngineError> {
        let mut log = Self::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|source| EngineError::BadLogLine { line: i + 1, source })?;
            log.append(rec);
        }
        Ok(log)
    }

    pub fn from_jsonl(s: &str) -> Result<Self, EngineError> {
        Self::read_jsonl(s.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        self.write_jsonl(BufWriter::new(File::create(path)?))?;
        Ok(())
    }
}

impl FromIterator<TrialRecord> for EventLog {
    fn from_iter<I: IntoIterator<Item = TrialRecord>>(iter: I) -> Self {
        Self { records: iter.into_iter().collect() }
    }
}

/// Shared JSONL sink; appends from concurrent trials are serialized.
pub struct LogSink {
    out: Mutex<Box<dyn Write + Send>>,
}

impl LogSink {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        Self { out: Mutex::new(out) }
    }

    pub fn append_file(path: &Path) -> io::Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(Box::new(f)))
    }

    pub fn append(&self, r: &TrialRecord) -> io::Result<()> {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        let mut out = self.out.lock().expect("log sink lock");
        out.write_all(&line)?;
        out.flush()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Attach the full event trace to each record.
    pub record_trace: bool,
}

pub fn run_trial(s: &Scenario, seed: u64) -> Result<TrialRecord, EngineError> {
    run_trial_with(s, seed, RunOptions::default())
}

pub fn run_trial_with(s: &Scenario, seed: u64, opts: RunOptions) -> Result<TrialRecord, EngineError> {
    let s = validate_scenario(s.clone()).map_err(|source| EngineError::ScenarioInvalid { name: s.name.clone(), source })?;
    let HumanSpec::Model(human) = &s.human else {
        return Err(EngineError::NotHeadless(s.name.clone()));
    };
    Trial::new(&s, human, seed, opts)?.run()
}

/// Runs every repetition of every scenario in batch order.
pub fn run_batch(batch: &[Scenario], master_seed: u64) -> Result<EventLog, EngineError> {
    run_batch_parallel(batch, master_seed, 1)
}

/// Like [`run_batch`] but spreads trials over `threads` workers. The log
/// order is the batch order regardless of completion order.
pub fn run_batch_parallel(batch: &[Scenario], master_seed: u64, threads: usize) -> Result<EventLog, EngineError> {
    for s in batch {
        validate_scenario(s.clone()).map_err(|source| EngineError::ScenarioInvalid { name: s.name.clone(), source })?;
        if !matches!(s.human, HumanSpec::Model(_)) {
            return Err(EngineError::NotHeadless(s.name.clone()));
        }
    }
    let jobs: Vec<(&Scenario, u64)> = batch
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..u64::from(s.repetitions)).map(move |j| (s, trial_seed(master_seed, i as u64, j))))
        .collect();
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return jobs.into_iter().map(|(s, seed)| run_trial(s, seed)).collect::<Result<EventLog, _>>();
    }
    let chunk = jobs.len().div_ceil(threads);
    let results: Vec<Result<Vec<TrialRecord>, EngineError>> = std::thread::scope(|scope| {
        let handles: Vec<_> =
            jobs.chunks(chunk).map(|part| scope.spawn(move || part.iter().map(|(s, seed)| run_trial(s, *seed)).collect())).collect();
        handles.into_iter().map(|h| h.join().expect("trial worker panicked")).collect()
    });
    let mut log = EventLog::new();
    for part in results {
        for r in part? {
            log.append(r);
        }
    }
    Ok(log)
}

#[derive(Debug)]
enum TrialEvent {
    SecretReady(Side, ShortSecret),
    DeviceTimeout(Side),
    Deadline,
}

struct Device {
    session: SessionState,
    endpoint: LoopbackEndpoint,
    reached_oob: bool,
    ended_at: Option<u64>,
    secret: Option<ShortSecret>,
}

struct Relay {
    adversary: Adversary,
    toward_a: LoopbackEndpoint,
    toward_b: LoopbackEndpoint,
}

#[derive(Clone, Copy)]
enum Source {
    Queue,
    Device(Side),
    Relay(Side),
}

struct Trial<'s> {
    scenario: &'s Scenario,
    human: &'s HumanModel,
    session_id: String,
    clock: VirtualClock,
    rngs: TrialRngs,
    a: Device,
    b: Device,
    relay: Option<Relay>,
    queue: EventQueue<TrialEvent>,
    oob_started: bool,
    deadline_hit: bool,
    record: TrialRecord,
    trace: Option<Vec<TraceEvent>>,
}

impl<'s> Trial<'s> {
    fn new(s: &'s Scenario, human: &'s HumanModel, seed: u64, opts: RunOptions) -> Result<Self, EngineError> {
        let mut rngs = TrialRngs::new(seed);
        let clock = VirtualClock::new();
        let cfg = |role| SessionConfig::new(role, s.method, s.timing, s.secret_bits);
        let sa = init_session(cfg(Role::Initiator), &mut rngs.initiator)?;
        let sb = init_session(cfg(Role::Responder), &mut rngs.responder)?;
        let (ep_a, ep_b, relay) = if s.adversary.kind == AdversaryKind::None {
            let (ea, eb) = loopback_pair_on(s.transport, &clock, rngs.link);
            (ea, eb, None)
        } else {
            let (ea, ra) = loopback_pair_on(s.transport, &clock, rngs.link);
            let (rb, eb) = loopback_pair_on(s.transport, &clock, rngs.link.wrapping_add(1));
            let adversary = Adversary::new(s.adversary, &mut rngs.adversary);
            (ea, eb, Some(Relay { adversary, toward_a: ra, toward_b: rb }))
        };
        let device = |session, endpoint| Device { session, endpoint, reached_oob: false, ended_at: None, secret: None };
        Ok(Self {
            scenario: s,
            human,
            session_id: format!("{}-{seed:016x}", s.name),
            clock,
            rngs,
            a: device(sa, ep_a),
            b: device(sb, ep_b),
            relay,
            queue: EventQueue::new(),
            oob_started: false,
            deadline_hit: false,
            record: TrialRecord::for_scenario(s, seed, TrialMode::Headless),
            trace: opts.record_trace.then(Vec::new),
        })
    }

    fn note(&mut self, actor: &str, event: impl FnOnce() -> String) {
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceEvent { t_ms: self.clock.now_ms(), actor: actor.to_string(), event: event() });
        }
    }

    fn device(&mut self, side: Side) -> &mut Device {
        match side {
            Side::A => &mut self.a,
            Side::B => &mut self.b,
        }
    }

    fn run(mut self) -> Result<TrialRecord, EngineError> {
        self.queue.push(self.scenario.timing.trial_timeout_ms, TrialEvent::Deadline);
        self.step_device(Side::A, SessionInput::Start);
        while !(self.a.session.is_terminal() && self.b.session.is_terminal()) {
            let Some((at, source)) = self.next_source() else { break };
            self.clock.advance_to(at);
            match source {
                Source::Queue => {
                    let (_, ev) = self.queue.pop().expect("peeked");
                    self.handle_event(ev);
                }
                Source::Device(side) => {
                    if let Some(Ok(frame)) = self.device(side).endpoint.try_receive() {
                        let msg = frame.message;
                        self.note(side_actor(side), || format!("recv {:?}", msg.kind));
                        self.step_device(side, SessionInput::Message(msg));
                    }
                }
                Source::Relay(side) => {
                    let relay = self.relay.as_mut().expect("relay source");
                    let ep = match side {
                        Side::A => &mut relay.toward_a,
                        Side::B => &mut relay.toward_b,
                    };
                    if let Some(Ok(frame)) = ep.try_receive() {
                        let routed = relay.adversary.mitm_transform(side, frame.message);
                        self.route(routed);
                    }
                }
            }
            if !self.oob_started && self.a.reached_oob && self.b.reached_oob {
                self.start_oob()?;
            }
        }
        Ok(self.finish())
    }

    fn next_source(&self) -> Option<(u64, Source)> {
        let mut best: Option<(u64, Source)> = None;
        let mut consider = |t: Option<u64>, src: Source| {
            if let Some(t) = t {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, src));
                }
            }
        };
        consider(self.a.endpoint.next_arrival(), Source::Device(Side::A));
        consider(self.b.endpoint.next_arrival(), Source::Device(Side::B));
        if let Some(r) = &self.relay {
            consider(r.toward_a.next_arrival(), Source::Relay(Side::A));
            consider(r.toward_b.next_arrival(), Source::Relay(Side::B));
        }
        consider(self.queue.peek_time(), Source::Queue);
        best
    }

    fn handle_event(&mut self, ev: TrialEvent) {
        match ev {
            TrialEvent::SecretReady(side, secret) => {
                self.note(side_actor(side), || format!("secret ready {secret}"));
                self.device(side).secret = Some(secret.clone());
                self.step_device(side, SessionInput::OobSecretReady(secret.clone()));
                if let Some(r) = self.relay.as_mut() {
                    let routed = r.adversary.observe_oob(side, &secret);
                    self.route(routed);
                }
            }
            TrialEvent::DeviceTimeout(side) => {
                self.note(side_actor(side), || "no complete press sequence".into());
                self.step_device(side, SessionInput::Timeout);
            }
            TrialEvent::Deadline => {
                self.deadline_hit = true;
                self.note("engine", || "trial deadline".into());
                for side in [Side::A, Side::B] {
                    if !self.device(side).session.is_terminal() {
                        self.step_device(side, SessionInput::Timeout);
                    }
                }
            }
        }
    }

    fn step_device(&mut self, side: Side, input: SessionInput) {
        let now = self.clock.now_ms();
        let session_id = self.session_id.clone();
        let dev = self.device(side);
        if dev.session.is_terminal() {
            return;
        }
        let out = match dev.session.step(input) {
            Ok(out) => out,
            Err(_) if dev.session.phase() == Phase::Aborted => vec![InBandMessage::result(Verdict::Abort)],
            Err(_) => Vec::new(),
        };
        for m in &out {
            // Loopback sends only fail on oversized frames, which the protocol never produces.
            let _ = dev.endpoint.send(&Frame::new(session_id.clone(), m.clone()));
        }
        if dev.session.phase() == Phase::OobWait {
            dev.reached_oob = true;
        }
        if dev.session.is_terminal() && dev.ended_at.is_none() {
            dev.ended_at = Some(now);
        }
        let phase = dev.session.phase();
        let kinds: Vec<MessageKind> = out.iter().map(|m| m.kind).collect();
        self.note(side_actor(side), || format!("phase {phase:?}, sent {kinds:?}"));
    }

    fn route(&mut self, routed: Vec<Routed>) {
        let relay = self.relay.as_mut().expect("routing requires a relay");
        for r in routed {
            let ep = match r.to {
                Side::A => &mut relay.toward_a,
                Side::B => &mut relay.toward_b,
            };
            let _ = ep.send(&Frame::new(self.session_id.clone(), r.message));
        }
    }

    fn start_oob(&mut self) -> Result<(), EngineError> {
        self.oob_started = true;
        let start = self.clock.now_ms();
        self.note("engine", || "out-of-band phase starts".into());
        let timing = self.scenario.timing;
        let k = self.scenario.secret_bits;
        let intervals = k / BITS_PER_INTERVAL;
        match self.scenario.method.signal_channel() {
            Some(channel) => {
                let secret_b = random_secret(k, &mut self.rngs.secret).expect("validated length");
                let schedule = encode_schedule(&secret_b, &timing, channel);
                self.queue.push(start + schedule.last(), TrialEvent::SecretReady(Side::B, secret_b));
                let presses = simulate_presses(&schedule, self.human, &timing, &mut self.rngs.human);
                let need = intervals + 1;
                let give_up = schedule.last() + timing.response_timeout_ms;
                match presses.events.get(need - 1) {
                    Some(p) if p.press_ms <= give_up => {
                        let trace = presses.clone().truncated(need);
                        let secret_a = decode_presses(&trace, &timing, k).expect("press count checked");
                        self.queue.push(start + p.press_ms, TrialEvent::SecretReady(Side::A, secret_a));
                    }
                    _ => self.queue.push(start + give_up, TrialEvent::DeviceTimeout(Side::A)),
                }
                self.record.schedule = Some(schedule);
                self.record.presses_a = Some(presses);
            }
            None => {
                let (ta, tb) = simulate_btb(self.human, intervals, &mut self.rngs.human).expect("k > 0");
                for (side, trace) in [(Side::A, &ta), (Side::B, &tb)] {
                    let secret = quantize_btb(trace, &timing).expect("at least two presses");
                    let last = trace.events.last().expect("nonempty").press_ms;
                    self.queue.push(start + last, TrialEvent::SecretReady(side, secret));
                }
                self.record.presses_a = Some(ta);
                self.record.presses_b = Some(tb);
            }
        }
        Ok(())
    }

    fn finish(mut self) -> TrialRecord {
        let end = if self.deadline_hit {
            self.scenario.timing.trial_timeout_ms
        } else {
            self.a.ended_at.unwrap_or(0).max(self.b.ended_at.unwrap_or(0))
        };
        let truth = GroundTruth {
            keys_substituted: self.scenario.adversary.kind.substitutes_keys(),
            secrets_equal: match (&self.a.secret, &self.b.secret) {
                (Some(x), Some(y)) => Some(x == y),
                _ => None,
            },
        };
        let deadline_hit = self.deadline_hit;
        let reason = |d: &'_ Device| -> Option<String> {
            if deadline_hit && d.session.end_reason() == Some("timeout") {
                Some("trial_timeout".to_string())
            } else {
                d.session.end_reason().map(str::to_string)
            }
        };
        let (reason_a, reason_b) = (reason(&self.a), reason(&self.b));
        let (outcome, detail) = classify_outcome(
            truth,
            Terminal { phase: self.a.session.phase(), reason: reason_a.as_deref() },
            Terminal { phase: self.b.session.phase(), reason: reason_b.as_deref() },
        );
        self.record.duration_ms = end;
        self.record.outcome = outcome;
        self.record.outcome_detail = detail;
        self.record.phase_a = Some(self.a.session.phase());
        self.record.phase_b = Some(self.b.session.phase());
        self.record.trace = self.trace.take();
        self.record
    }
}

fn side_actor(side: Side) -> &'static str {
    match side {
        Side::A => "device_a",
        Side::B => "device_b",
    }
}
