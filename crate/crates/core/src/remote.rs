//! One device of a pairing trial driven over a real link.
//!
//! Each process owns one protocol session per repetition. The in-band
//! messages travel over any [`Endpoint`]; the out-of-band phase travels over
//! an [`OobLink`]. The responder (signal side) draws the short secret, or for
//! button-to-button simulates both press traces, and tells the initiator what
//! its human perceived. Random streams are derived exactly as in the engine,
//! so a seeded remote trial replays the simulated one.

use std::collections::{HashSet, VecDeque};
use std::time::Instant;

use thiserror::Error;

use crate::actors::{simulate_btb, simulate_presses, HumanModel, HumanSpec};
use crate::coding::{decode_presses, encode_schedule, quantize_btb, random_secret, PressTrace, SignalSchedule, BITS_PER_INTERVAL};
use crate::engine::{trial_seed, EventLog, Outcome, TrialMode, TrialRecord, TrialRngs};
use crate::model::{validate_scenario, ModelError, Scenario};
use crate::oob::{OobLink, OobMessage};
use crate::protocol::{init_session, InBandMessage, Phase, ProtocolError, Role, SessionConfig, SessionInput, SessionState, Verdict};
use crate::transport::{Endpoint, Frame, TransportError};

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("scenario is invalid: {0}")]
    ScenarioInvalid(#[from] ModelError),
    #[error("remote peers need a scripted human model")]
    NotHeadless,
    #[error("session setup failed: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("link failed: {0}")]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone)]
pub struct PeerConfig {
    pub role: Role,
    pub scenario: Scenario,
    pub master_seed: u64,
}

/// Session identifier shared by both peers (and the engine) for one trial.
pub fn session_id(scenario: &Scenario, seed: u64) -> String {
    format!("{}-{seed:016x}", scenario.name)
}

/// Runs every repetition of the scenario as one side of the pairing and
/// returns this side's records. A closed link ends the run early; the
/// interrupted trial is recorded as an abort.
pub fn run_peer<E: Endpoint>(ep: &mut E, oob: &mut OobLink, cfg: &PeerConfig) -> Result<EventLog, RemoteError> {
    let scenario = validate_scenario(cfg.scenario.clone())?;
    let HumanSpec::Model(human) = &scenario.human else {
        return Err(RemoteError::NotHeadless);
    };
    let mut log = EventLog::new();
    let mut mailbox = Mailbox::default();
    for rep in 0..u64::from(scenario.repetitions) {
        let seed = trial_seed(cfg.master_seed, 0, rep);
        let mut peer = Peer::new(cfg.role, &scenario, human, seed)?;
        let closed = peer.run(ep, oob, &mut mailbox);
        mailbox.finish(&peer.id);
        log.append(peer.into_record());
        if closed {
            break;
        }
    }
    Ok(log)
}

/// Holds traffic that arrived ahead of its session. Under a relay the two
/// legs run independently, so the next session's first frames can overtake
/// the last frames of the current one.
#[derive(Default)]
struct Mailbox {
    early_frames: VecDeque<Frame>,
    early_oob: VecDeque<OobMessage>,
    finished: HashSet<String>,
}

impl Mailbox {
    fn finish(&mut self, id: &str) {
        self.finished.insert(id.to_string());
        self.early_frames.retain(|f| f.session != id);
        self.early_oob.retain(|m| m.session() != id);
    }

    fn take_frame(&mut self, id: &str) -> Option<Frame> {
        let i = self.early_frames.iter().position(|f| f.session == id)?;
        self.early_frames.remove(i)
    }

    fn take_oob(&mut self, id: &str) -> Option<OobMessage> {
        let i = self.early_oob.iter().position(|m| m.session() == id)?;
        self.early_oob.remove(i)
    }

    fn hold_frame(&mut self, f: Frame) {
        if !self.finished.contains(&f.session) {
            self.early_frames.push_back(f);
        }
    }

    fn hold_oob(&mut self, m: OobMessage) {
        if !self.finished.contains(m.session()) {
            self.early_oob.push_back(m);
        }
    }
}

struct Peer<'s> {
    scenario: &'s Scenario,
    human: &'s HumanModel,
    id: String,
    rngs: TrialRngs,
    session: SessionState,
    record: TrialRecord,
    started: Instant,
    oob_span_ms: u64,
    oob_done: bool,
}

impl<'s> Peer<'s> {
    fn new(role: Role, scenario: &'s Scenario, human: &'s HumanModel, seed: u64) -> Result<Self, RemoteError> {
        let mut rngs = TrialRngs::new(seed);
        let cfg = SessionConfig::new(role, scenario.method, scenario.timing, scenario.secret_bits);
        let session = match role {
            Role::Initiator => init_session(cfg, &mut rngs.initiator)?,
            Role::Responder => init_session(cfg, &mut rngs.responder)?,
        };
        Ok(Self {
            scenario,
            human,
            id: crate::remote::session_id(scenario, seed),
            rngs,
            session,
            record: TrialRecord::for_scenario(scenario, seed, TrialMode::Remote),
            started: Instant::now(),
            oob_span_ms: 0,
            oob_done: false,
        })
    }

    /// Returns true if the link was lost.
    fn run<E: Endpoint>(&mut self, ep: &mut E, oob: &mut OobLink, mailbox: &mut Mailbox) -> bool {
        let timeout = self.scenario.timing.trial_timeout_ms;
        if self.session.role() == Role::Initiator && self.feed(ep, SessionInput::Start).is_err() {
            return true;
        }
        while !self.session.is_terminal() {
            if self.session.phase() == Phase::OobWait && !self.oob_done {
                self.oob_done = true;
                let input = match self.session.role() {
                    Role::Responder => self.responder_oob(oob),
                    Role::Initiator => self.initiator_oob(oob, mailbox),
                };
                if self.feed(ep, input).is_err() {
                    return true;
                }
                continue;
            }
            let next = match mailbox.take_frame(&self.id) {
                Some(f) => Ok(f),
                None => ep.receive(timeout),
            };
            match next {
                Ok(frame) if frame.session == self.id => {
                    if self.feed(ep, SessionInput::Message(frame.message)).is_err() {
                        return true;
                    }
                }
                Ok(frame) => mailbox.hold_frame(frame),
                Err(TransportError::Timeout) => {
                    let _ = self.feed(ep, SessionInput::Timeout);
                }
                Err(_) => {
                    self.abort("peer_closed");
                    return true;
                }
            }
        }
        false
    }

    fn feed<E: Endpoint>(&mut self, ep: &mut E, input: SessionInput) -> Result<(), TransportError> {
        if self.session.is_terminal() {
            return Ok(());
        }
        let out = match self.session.step(input) {
            Ok(out) => out,
            Err(_) if self.session.phase() == Phase::Aborted => vec![InBandMessage::result(Verdict::Abort)],
            Err(_) => Vec::new(),
        };
        for m in out {
            if let Err(e) = ep.send(&Frame::new(self.id.clone(), m)) {
                self.abort("peer_closed");
                return Err(e);
            }
        }
        Ok(())
    }

    fn abort(&mut self, reason: &str) {
        if !self.session.is_terminal() {
            self.record.outcome_detail = reason.to_string();
            let _ = self.session.step(SessionInput::Message(InBandMessage::result(Verdict::Abort)));
        }
    }

    fn responder_oob(&mut self, oob: &mut OobLink) -> SessionInput {
        let timing = self.scenario.timing;
        let k = self.scenario.secret_bits;
        let message = match self.scenario.method.signal_channel() {
            Some(channel) => {
                let secret = random_secret(k, &mut self.rngs.secret).expect("validated length");
                let schedule = encode_schedule(&secret, &timing, channel);
                self.oob_span_ms = schedule.last();
                self.record.schedule = Some(schedule.clone());
                let msg = OobMessage::Signals { session: self.id.clone(), schedule };
                (msg, SessionInput::OobSecretReady(secret))
            }
            None => {
                let (ta, tb) = simulate_btb(self.human, k / BITS_PER_INTERVAL, &mut self.rngs.human).expect("k > 0");
                let secret = quantize_btb(&tb, &timing).expect("at least two presses");
                self.oob_span_ms = tb.events.last().map_or(0, |p| p.press_ms);
                self.record.presses_b = Some(tb);
                let msg = OobMessage::Presses { session: self.id.clone(), trace: ta };
                (msg, SessionInput::OobSecretReady(secret))
            }
        };
        match oob.send(&message.0) {
            Ok(()) => message.1,
            Err(_) => SessionInput::Timeout,
        }
    }

    fn initiator_oob(&mut self, oob: &mut OobLink, mailbox: &mut Mailbox) -> SessionInput {
        let timing = self.scenario.timing;
        let k = self.scenario.secret_bits;
        let msg = match mailbox.take_oob(&self.id) {
            Some(m) => m,
            None => loop {
                match oob.recv(timing.trial_timeout_ms) {
                    Ok(m) if m.session() == self.id => break m,
                    Ok(m) => mailbox.hold_oob(m),
                    Err(_) => return SessionInput::Timeout,
                }
            },
        };
        match msg {
            OobMessage::Signals { schedule, .. } => self.perceive_signals(&schedule),
            OobMessage::Presses { trace, .. } => {
                self.oob_span_ms = trace.events.last().map_or(0, |p| p.press_ms);
                let input = match quantize_btb(&trace, &timing) {
                    Ok(s) if s.len() == k => SessionInput::OobSecretReady(s),
                    _ => SessionInput::Timeout,
                };
                self.record.presses_a = Some(trace);
                input
            }
        }
    }

    fn perceive_signals(&mut self, schedule: &SignalSchedule) -> SessionInput {
        let timing = self.scenario.timing;
        let k = self.scenario.secret_bits;
        let presses = simulate_presses(schedule, self.human, &timing, &mut self.rngs.human);
        let need = k / BITS_PER_INTERVAL + 1;
        let give_up = schedule.last() + timing.response_timeout_ms;
        let input = match presses.events.get(need - 1) {
            Some(p) if p.press_ms <= give_up => {
                self.oob_span_ms = p.press_ms;
                let trace: PressTrace = presses.clone().truncated(need);
                SessionInput::OobSecretReady(decode_presses(&trace, &timing, k).expect("press count checked"))
            }
            _ => {
                self.oob_span_ms = give_up;
                SessionInput::Timeout
            }
        };
        self.record.schedule = Some(schedule.clone());
        self.record.presses_a = Some(presses);
        input
    }

    /// Remote records reflect this side only: the peer's phase and the
    /// adversary's presence are unknown here.
    fn into_record(mut self) -> TrialRecord {
        let elapsed = self.started.elapsed().as_millis() as u64;
        let phase = self.session.phase();
        let (outcome, detail) = match phase {
            Phase::Accepted => (Outcome::Success, "accepted".to_string()),
            Phase::Aborted => (Outcome::Abort, self.session.end_reason().unwrap_or("aborted").to_string()),
            _ => (Outcome::SafeError, self.session.end_reason().unwrap_or("rejected").to_string()),
        };
        if self.record.outcome_detail.is_empty() {
            self.record.outcome_detail = detail;
        }
        self.record.outcome = outcome;
        self.record.duration_ms = elapsed + self.oob_span_ms;
        match self.session.role() {
            Role::Initiator => self.record.phase_a = Some(phase),
            Role::Responder => self.record.phase_b = Some(phase),
        }
        self.record
    }
}
