//! Live trials with a person at a browser.
//!
//! [`InteractiveSession`] is transport-free: the server feeds it client
//! events and its own wall clock, and forwards whatever server events come
//! back. Both virtual devices live in the same session; only the human is
//! remote.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actors::{AdversaryKind, HumanSpec, Side};
use crate::coding::{
    decode_presses, encode_schedule, quantize_btb, random_secret, Press, PressTrace, ShortSecret, SignalChannel, SignalSchedule,
    BITS_PER_INTERVAL,
};
use crate::engine::{classify_outcome, GroundTruth, Outcome, Terminal, TrialMode, TrialRecord, TrialRngs};
use crate::model::{validate_scenario, Capability, DeviceSpec, ModelError, PairingMethod, Scenario};
use crate::protocol::{init_session, InBandMessage, Phase, ProtocolError, Role, SessionConfig, SessionInput, SessionState, Verdict};

/// Ping/pong round trips needed before presses are accepted.
pub const SYNC_ROUNDS: usize = 5;
/// Delay between the end of sync and the first signal.
pub const SIGNAL_LEAD_MS: u64 = 1_000;

#[derive(Debug, Error)]
pub enum InteractiveError {
    #[error("scenario is invalid: {0}")]
    ScenarioInvalid(#[from] ModelError),
    #[error("scenario must set human to \"interactive\"")]
    NotInteractive,
    #[error("adversaries are not supported in live trials")]
    AdversaryUnsupported,
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session setup failed: {0}")]
    Protocol(#[from] ProtocolError),
}

/// Messages from the browser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum ClientEvent {
    Press {
        t_client: i64,
        /// "a" or "b"; omitted means every button device.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        device: Option<String>,
    },
    Release {
        t_client: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        device: Option<String>,
    },
    SyncPong {
        t: i64,
        t_client: i64,
    },
}

/// Messages to the browser. `at_wall_ms` is on the client's clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum ServerEvent {
    Signal { channel: SignalChannel, at_wall_ms: i64 },
    TrialStart,
    Result { record: Box<TrialRecord> },
    SyncPing { t: i64 },
    Warn { msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DevicePanel {
    pub device: String,
    pub side: String,
    pub widgets: Vec<Capability>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub session_id: String,
    pub live_url: String,
    pub method: PairingMethod,
    pub panels: Vec<DevicePanel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiveStage {
    Syncing,
    Signalling,
    Finished,
}

/// Snapshot served by `GET /sessions/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub stage: LiveStage,
    pub sync_samples: usize,
    pub clock_offset_ms: Option<i64>,
    pub phase_a: Phase,
    pub phase_b: Phase,
    pub presses_a: usize,
    pub presses_b: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<TrialRecord>,
}

fn panel(d: &DeviceSpec, side: &str) -> DevicePanel {
    let shown = [Capability::Button, Capability::Display, Capability::Led, Capability::Speaker];
    DevicePanel {
        device: d.name.clone(),
        side: side.to_string(),
        widgets: shown.into_iter().filter(|c| d.capabilities.contains(*c)).collect(),
    }
}

/// Median of client-minus-server offsets; each sample assumes a symmetric
/// path delay.
pub fn estimate_offset(samples: &[i64]) -> Option<i64> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_unstable();
    let mid = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[mid] } else { (s[mid - 1] + s[mid]).div_euclid(2) })
}

#[derive(Default)]
struct Buttons {
    presses: Vec<Press>,
}

impl Buttons {
    fn press(&mut self, t: u64) {
        self.presses.push(Press { press_ms: t, release_ms: t });
    }

    fn release(&mut self, t: u64) {
        if let Some(p) = self.presses.iter_mut().rev().find(|p| p.press_ms <= t) {
            if p.release_ms == p.press_ms {
                p.release_ms = t;
            }
        }
    }

    /// Presses in timestamp order, debounced.
    fn trace(&self, debounce_ms: u64) -> PressTrace {
        let mut events = self.presses.clone();
        events.sort_by_key(|p| p.press_ms);
        PressTrace { events }.debounced(debounce_ms)
    }
}

pub struct InteractiveSession {
    id: String,
    scenario: Scenario,
    seed: u64,
    rngs: TrialRngs,
    a: SessionState,
    b: SessionState,
    offsets: Vec<i64>,
    offset: Option<i64>,
    stage: LiveStage,
    started_ms: u64,
    oob_start_ms: u64,
    schedule: Option<SignalSchedule>,
    secret_b: Option<ShortSecret>,
    secret_a: Option<ShortSecret>,
    a_ready: bool,
    b_ready: bool,
    buttons: [Buttons; 2],
    record: Option<TrialRecord>,
}

impl InteractiveSession {
    /// Sets up both devices; call [`begin`](Self::begin) once the client is connected.
    pub fn new(id: impl Into<String>, scenario: Scenario, seed: u64) -> Result<Self, InteractiveError> {
        let scenario = validate_scenario(scenario)?;
        if scenario.human != HumanSpec::Interactive {
            return Err(InteractiveError::NotInteractive);
        }
        if scenario.adversary.kind != AdversaryKind::None {
            return Err(InteractiveError::AdversaryUnsupported);
        }
        let mut rngs = TrialRngs::new(seed);
        let cfg = |role| SessionConfig::new(role, scenario.method, scenario.timing, scenario.secret_bits);
        let a = init_session(cfg(Role::Initiator), &mut rngs.initiator)?;
        let b = init_session(cfg(Role::Responder), &mut rngs.responder)?;
        Ok(Self {
            id: id.into(),
            scenario,
            seed,
            rngs,
            a,
            b,
            offsets: Vec::new(),
            offset: None,
            stage: LiveStage::Syncing,
            started_ms: 0,
            oob_start_ms: 0,
            schedule: None,
            secret_b: None,
            secret_a: None,
            a_ready: false,
            b_ready: false,
            buttons: [Buttons::default(), Buttons::default()],
            record: None,
        })
    }

    /// A fresh seed from the operating system for live sessions.
    pub fn random_seed() -> u64 {
        rand::random()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn clock_offset_ms(&self) -> Option<i64> {
        self.offset
    }

    pub fn is_finished(&self) -> bool {
        self.stage == LiveStage::Finished
    }

    pub fn record(&self) -> Option<&TrialRecord> {
        self.record.as_ref()
    }

    pub fn descriptor(&self) -> SessionDescriptor {
        SessionDescriptor {
            session_id: self.id.clone(),
            live_url: format!("/sessions/{}/live", self.id),
            method: self.scenario.method,
            panels: vec![panel(&self.scenario.device_a, "a"), panel(&self.scenario.device_b, "b")],
        }
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            stage: self.stage,
            sync_samples: self.offsets.len(),
            clock_offset_ms: self.offset,
            phase_a: self.a.phase(),
            phase_b: self.b.phase(),
            presses_a: self.buttons[0].presses.len(),
            presses_b: self.buttons[1].presses.len(),
            record: self.record.clone(),
        }
    }

    /// First sync ping.
    pub fn begin(&mut self, now_ms: u64) -> Vec<ServerEvent> {
        vec![ServerEvent::SyncPing { t: now_ms as i64 }]
    }

    pub fn handle(&mut self, ev: ClientEvent, now_ms: u64) -> Vec<ServerEvent> {
        match ev {
            ClientEvent::SyncPong { t, t_client } => self.on_pong(t, t_client, now_ms),
            ClientEvent::Press { .. } | ClientEvent::Release { .. } if self.stage != LiveStage::Signalling => {
                let msg = match self.stage {
                    LiveStage::Syncing => "SyncIncomplete: press ignored until clock sync completes",
                    _ => "trial already finished; press ignored",
                };
                vec![ServerEvent::Warn { msg: msg.into() }]
            }
            ClientEvent::Press { t_client, device } => self.on_button(t_client, device.as_deref(), true, now_ms),
            ClientEvent::Release { t_client, device } => self.on_button(t_client, device.as_deref(), false, now_ms),
        }
    }

    /// Advances time-driven parts of the trial: the responder's end of
    /// signalling and response timeouts.
    pub fn tick(&mut self, now_ms: u64) -> Vec<ServerEvent> {
        if self.stage != LiveStage::Signalling {
            return Vec::new();
        }
        let timing = self.scenario.timing;
        if let Some(last) = self.schedule.as_ref().map(SignalSchedule::last) {
            if !self.b_ready && now_ms >= self.oob_start_ms + last {
                self.b_ready = true;
                let s = self.secret_b.clone().expect("drawn with the schedule");
                self.deliver(Side::B, SessionInput::OobSecretReady(s));
            }
            if !self.a_ready && now_ms > self.oob_start_ms + last + timing.response_timeout_ms {
                self.a_ready = true;
                self.deliver(Side::A, SessionInput::Timeout);
            }
        } else {
            let n = self.scenario.secret_bits / BITS_PER_INTERVAL;
            let limit = self.oob_start_ms + n as u64 * timing.max_gap_ms() + timing.response_timeout_ms;
            if now_ms > limit {
                for side in [Side::A, Side::B] {
                    if !self.ready(side) {
                        self.set_ready(side);
                        self.deliver(side, SessionInput::Timeout);
                    }
                }
            }
        }
        if now_ms >= self.started_ms + timing.trial_timeout_ms {
            for side in [Side::A, Side::B] {
                self.deliver(side, SessionInput::Timeout);
            }
        }
        self.maybe_finish(now_ms)
    }

    fn on_pong(&mut self, t: i64, t_client: i64, now_ms: u64) -> Vec<ServerEvent> {
        if self.stage != LiveStage::Syncing {
            return Vec::new();
        }
        let now = now_ms as i64;
        let rtt = (now - t).max(0);
        self.offsets.push(t_client - (t + rtt / 2));
        if self.offsets.len() < SYNC_ROUNDS {
            return vec![ServerEvent::SyncPing { t: now }];
        }
        self.offset = estimate_offset(&self.offsets);
        self.start_trial(now_ms)
    }

    fn start_trial(&mut self, now_ms: u64) -> Vec<ServerEvent> {
        self.started_ms = now_ms;
        let mut wire = VecDeque::new();
        match self.a.step(SessionInput::Start) {
            Ok(out) => wire.extend(out.into_iter().map(|m| (Side::B, m))),
            Err(e) => return vec![ServerEvent::Warn { msg: format!("protocol start failed: {e}") }],
        }
        self.pump(wire);
        let mut events = vec![ServerEvent::TrialStart];
        if self.a.phase() != Phase::OobWait || self.b.phase() != Phase::OobWait {
            return self.maybe_finish(now_ms);
        }
        self.stage = LiveStage::Signalling;
        self.oob_start_ms = now_ms + SIGNAL_LEAD_MS;
        if let Some(channel) = self.scenario.method.signal_channel() {
            let secret = random_secret(self.scenario.secret_bits, &mut self.rngs.secret).expect("validated length");
            let schedule = encode_schedule(&secret, &self.scenario.timing, channel);
            let offset = self.offset.unwrap_or(0);
            events.extend(
                schedule.events.iter().map(|&e| ServerEvent::Signal { channel, at_wall_ms: (self.oob_start_ms + e) as i64 + offset }),
            );
            self.secret_b = Some(secret);
            self.schedule = Some(schedule);
        }
        events
    }

    fn on_button(&mut self, t_client: i64, device: Option<&str>, press: bool, now_ms: u64) -> Vec<ServerEvent> {
        let server_t = t_client - self.offset.unwrap_or(0);
        let Some(rel) = u64::try_from(server_t - self.oob_start_ms as i64).ok() else {
            return vec![ServerEvent::Warn { msg: "press before the first signal ignored".into() }];
        };
        let sides: Vec<usize> = match (self.scenario.method, device) {
            (PairingMethod::BtoB, None) => vec![0, 1],
            (PairingMethod::BtoB, Some("b")) => vec![1],
            (_, Some("b")) => return vec![ServerEvent::Warn { msg: "device b has no button in this method".into() }],
            _ => vec![0],
        };
        for i in sides {
            if press {
                self.buttons[i].press(rel);
            } else {
                self.buttons[i].release(rel);
            }
        }
        if press {
            self.check_presses();
        }
        let mut out = self.tick(now_ms);
        if out.is_empty() {
            out = self.maybe_finish(now_ms);
        }
        out
    }

    fn check_presses(&mut self) {
        let timing = self.scenario.timing;
        let k = self.scenario.secret_bits;
        let need = k / BITS_PER_INTERVAL + 1;
        let sides: &[Side] = if self.scenario.method == PairingMethod::BtoB { &[Side::A, Side::B] } else { &[Side::A] };
        for &side in sides {
            if self.ready(side) {
                continue;
            }
            let trace = self.buttons[side as usize].trace(timing.debounce_ms);
            if trace.len() < need {
                continue;
            }
            let trace = trace.truncated(need);
            let secret = if self.scenario.method == PairingMethod::BtoB {
                quantize_btb(&trace, &timing)
            } else {
                decode_presses(&trace, &timing, k)
            };
            self.set_ready(side);
            match secret {
                Ok(s) => {
                    if side == Side::A {
                        self.secret_a = Some(s.clone());
                    } else {
                        self.secret_b = Some(s.clone());
                    }
                    self.deliver(side, SessionInput::OobSecretReady(s));
                }
                Err(_) => self.deliver(side, SessionInput::Timeout),
            }
        }
    }

    fn ready(&self, side: Side) -> bool {
        match side {
            Side::A => self.a_ready,
            Side::B => self.b_ready,
        }
    }

    fn set_ready(&mut self, side: Side) {
        match side {
            Side::A => self.a_ready = true,
            Side::B => self.b_ready = true,
        }
    }

    fn deliver(&mut self, side: Side, input: SessionInput) {
        let out = step_or_abort(self.session_mut(side), input);
        self.pump(out.into_iter().map(|m| (side.other(), m)).collect());
    }

    fn session_mut(&mut self, side: Side) -> &mut SessionState {
        match side {
            Side::A => &mut self.a,
            Side::B => &mut self.b,
        }
    }

    /// Delivers in-band messages between the two local devices until quiet.
    fn pump(&mut self, mut wire: VecDeque<(Side, InBandMessage)>) {
        while let Some((to, m)) = wire.pop_front() {
            let out = step_or_abort(self.session_mut(to), SessionInput::Message(m));
            wire.extend(out.into_iter().map(|m| (to.other(), m)));
        }
    }

    fn maybe_finish(&mut self, now_ms: u64) -> Vec<ServerEvent> {
        if self.stage == LiveStage::Finished || !(self.a.is_terminal() && self.b.is_terminal()) {
            return Vec::new();
        }
        self.stage = LiveStage::Finished;
        let truth = GroundTruth {
            keys_substituted: false,
            secrets_equal: match (&self.secret_a, &self.secret_b) {
                (Some(x), Some(y)) => Some(x == y),
                _ => None,
            },
        };
        let (outcome, detail) = classify_outcome(
            truth,
            Terminal { phase: self.a.phase(), reason: self.a.end_reason() },
            Terminal { phase: self.b.phase(), reason: self.b.end_reason() },
        );
        let mut r = TrialRecord::for_scenario(&self.scenario, self.seed, TrialMode::Interactive);
        r.duration_ms = now_ms.saturating_sub(self.started_ms);
        r.outcome = outcome;
        r.outcome_detail = detail;
        r.phase_a = Some(self.a.phase());
        r.phase_b = Some(self.b.phase());
        r.schedule = self.schedule.clone();
        let debounce = self.scenario.timing.debounce_ms;
        r.presses_a = Some(self.buttons[0].trace(debounce));
        if self.scenario.method == PairingMethod::BtoB {
            r.presses_b = Some(self.buttons[1].trace(debounce));
        }
        debug_assert!(outcome != Outcome::FatalError || truth.secrets_equal == Some(false));
        self.record = Some(r.clone());
        vec![ServerEvent::Result { record: Box::new(r) }]
    }
}

fn step_or_abort(s: &mut SessionState, input: SessionInput) -> Vec<InBandMessage> {
    if s.is_terminal() {
        return Vec::new();
    }
    match s.step(input) {
        Ok(out) => out,
        Err(_) if s.phase() == Phase::Aborted => vec![InBandMessage::result(Verdict::Abort)],
        Err(_) => Vec::new(),
    }
}
