//! Scripted humans and in-band adversaries.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding::{
    decode_presses, quantize_btb, random_secret, Press, PressTrace, ShortSecret, SignalChannel, SignalSchedule, TimingParams,
};
use crate::protocol::{init_session, HelloPayload, InBandMessage, MessageKind, Phase, SessionInput, SessionState, Verdict, CHECK_LEN};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActorError {
    #[error("button-to-button needs at least one interval")]
    TooFewIntervals,
    #[error("{0}")]
    InvalidModel(String),
    #[error("{0}")]
    InvalidAdversary(String),
}

/// Button release follows the press by a uniform hold time in this range.
const HOLD_MS: std::ops::RangeInclusive<u64> = 80..=150;

/// How a person responds to one kind of stimulus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelResponse {
    pub reaction_mean_ms: f64,
    pub reaction_sd_ms: f64,
    pub miss_prob: f64,
}

impl ChannelResponse {
    pub const fn new(reaction_mean_ms: f64, reaction_sd_ms: f64, miss_prob: f64) -> Self {
        Self { reaction_mean_ms, reaction_sd_ms, miss_prob }
    }

    /// A person who reacts instantly and never misses.
    pub const fn ideal() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HumanModel {
    pub display: ChannelResponse,
    pub led: ChannelResponse,
    pub beep: ChannelResponse,
    /// Per-device timestamp jitter of a button-to-button press.
    pub btb_skew_sd_ms: f64,
    pub btb_gap_min_ms: f64,
    pub btb_gap_max_ms: f64,
    pub spurious_prob_per_s: f64,
}

impl Default for HumanModel {
    /// Calibrated so the simulated safe-error ordering follows the human
    /// study: button-to-button best, then display, beep, LED.
    fn default() -> Self {
        Self {
            display: ChannelResponse::new(250.0, 30.0, 0.01),
            beep: ChannelResponse::new(270.0, 32.0, 0.02),
            led: ChannelResponse::new(290.0, 35.0, 0.03),
            btb_skew_sd_ms: 1.5,
            btb_gap_min_ms: 400.0,
            btb_gap_max_ms: 1_600.0,
            spurious_prob_per_s: 0.002,
        }
    }
}

impl HumanModel {
    /// Zero latency, zero jitter, no misses, no spurious presses.
    pub fn ideal() -> Self {
        Self {
            display: ChannelResponse::ideal(),
            led: ChannelResponse::ideal(),
            beep: ChannelResponse::ideal(),
            btb_skew_sd_ms: 0.0,
            spurious_prob_per_s: 0.0,
            ..Self::default()
        }
    }

    pub fn channel(&self, c: SignalChannel) -> &ChannelResponse {
        match c {
            SignalChannel::Display => &self.display,
            SignalChannel::Led => &self.led,
            SignalChannel::Speaker => &self.beep,
        }
    }

    pub fn channel_mut(&mut self, c: SignalChannel) -> &mut ChannelResponse {
        match c {
            SignalChannel::Display => &mut self.display,
            SignalChannel::Led => &mut self.led,
            SignalChannel::Speaker => &mut self.beep,
        }
    }

    pub fn validate(&self, timing: &TimingParams) -> Result<(), ActorError> {
        let bad = |m: String| Err(ActorError::InvalidModel(m));
        for (name, c) in [("display", &self.display), ("led", &self.led), ("beep", &self.beep)] {
            if !(c.reaction_mean_ms >= 0.0 && c.reaction_sd_ms >= 0.0) {
                return bad(format!("{name}: reaction parameters must be nonnegative"));
            }
            if !(0.0..=1.0).contains(&c.miss_prob) {
                return bad(format!("{name}: miss_prob must lie in [0, 1]"));
            }
        }
        if self.btb_skew_sd_ms.is_nan() || self.btb_skew_sd_ms < 0.0 {
            return bad("btb_skew_sd_ms must be nonnegative".into());
        }
        if self.btb_gap_min_ms.is_nan() || self.btb_gap_min_ms < timing.debounce_ms as f64 {
            return bad("btb_gap_min_ms must be at least the debounce interval".into());
        }
        if self.btb_gap_max_ms.is_nan() || self.btb_gap_max_ms < self.btb_gap_min_ms {
            return bad("btb_gap_max_ms must be at least btb_gap_min_ms".into());
        }
        if !(0.0..=1.0).contains(&self.spurious_prob_per_s) {
            return bad("spurious_prob_per_s must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Who operates the buttons in a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanSpec {
    Model(HumanModel),
    /// A real person drives the trial through the live service.
    Interactive,
}

impl Default for HumanSpec {
    fn default() -> Self {
        HumanSpec::Model(HumanModel::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    #[default]
    None,
    /// Relays honestly but replaces opened check values with random bytes.
    #[serde(alias = "mitm_random_guess")]
    RandomGuess,
    /// Runs its own key exchange with each side.
    #[serde(alias = "mitm_key_substitution")]
    KeySubstitution,
    /// Key substitution with a view of the out-of-band channel.
    OobEavesdrop,
}

impl AdversaryKind {
    pub fn substitutes_keys(self) -> bool {
        matches!(self, AdversaryKind::KeySubstitution | AdversaryKind::OobEavesdrop)
    }

    pub fn code(self) -> &'static str {
        match self {
            AdversaryKind::None => "none",
            AdversaryKind::RandomGuess => "random_guess",
            AdversaryKind::KeySubstitution => "key_substitution",
            AdversaryKind::OobEavesdrop => "oob_eavesdrop",
        }
    }
}

impl std::str::FromStr for AdversaryKind {
    type Err = ActorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| ActorError::InvalidAdversary(format!("unknown attack {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversaryConfig {
    pub kind: AdversaryKind,
    pub observes_oob: bool,
}

impl AdversaryConfig {
    pub fn new(kind: AdversaryKind, observes_oob: bool) -> Self {
        Self { kind, observes_oob }
    }

    /// Config for a named attack; eavesdropping implies OOB observation.
    pub fn for_attack(kind: AdversaryKind) -> Self {
        Self { kind, observes_oob: kind == AdversaryKind::OobEavesdrop }
    }

    pub fn validate(&self) -> Result<(), ActorError> {
        if self.kind == AdversaryKind::OobEavesdrop && !self.observes_oob {
            return Err(ActorError::InvalidAdversary("oob_eavesdrop requires observes_oob".into()));
        }
        Ok(())
    }
}

/// Presses a person makes while following `schedule`.
pub fn simulate_presses<R: Rng + ?Sized>(schedule: &SignalSchedule, m: &HumanModel, timing: &TimingParams, rng: &mut R) -> PressTrace {
    let resp = m.channel(schedule.channel);
    let latency = Normal::new(resp.reaction_mean_ms, resp.reaction_sd_ms).expect("validated model");
    let mut events = Vec::with_capacity(schedule.events.len());
    for &ts in &schedule.events {
        if rng.random::<f64>() < resp.miss_prob {
            continue;
        }
        let delay = latency.sample(rng).max(0.0).round() as u64;
        events.push(press_at(ts + delay, rng));
    }
    if m.spurious_prob_per_s > 0.0 {
        let window_end = (schedule.last() + timing.response_timeout_ms) as f64;
        let inter = Exp::new(m.spurious_prob_per_s / 1_000.0).expect("positive rate");
        let mut t = inter.sample(rng);
        while t < window_end {
            events.push(press_at(t.round() as u64, rng));
            t += inter.sample(rng);
        }
    }
    PressTrace { events }.debounced(timing.debounce_ms)
}

fn press_at<R: Rng + ?Sized>(t: u64, rng: &mut R) -> Press {
    Press { press_ms: t, release_ms: t + rng.random_range(HOLD_MS) }
}

/// A person pressing the buttons of both devices together, `n_intervals + 1` times.
pub fn simulate_btb<R: Rng + ?Sized>(m: &HumanModel, n_intervals: usize, rng: &mut R) -> Result<(PressTrace, PressTrace), ActorError> {
    if n_intervals == 0 {
        return Err(ActorError::TooFewIntervals);
    }
    let mut instants = Vec::with_capacity(n_intervals + 1);
    // Leave room so jitter never pushes the first press below zero.
    let mut t = (4.0 * m.btb_skew_sd_ms).ceil();
    instants.push(t);
    for _ in 0..n_intervals {
        t += if m.btb_gap_max_ms > m.btb_gap_min_ms { rng.random_range(m.btb_gap_min_ms..m.btb_gap_max_ms) } else { m.btb_gap_min_ms };
        instants.push(t);
    }
    let skew = Normal::new(0.0, m.btb_skew_sd_ms).expect("validated model");
    let device_trace = |rng: &mut R| {
        let events = instants.iter().map(|&i| press_at((i + skew.sample(rng)).max(0.0).round() as u64, rng)).collect();
        PressTrace { events }.debounced(0)
    };
    let a = device_trace(rng);
    let b = device_trace(rng);
    Ok((a, b))
}

/// Honest endpoint on one side of the adversary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Toward the initiator.
    A,
    /// Toward the responder.
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

/// A frame the adversary emits toward one side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Routed {
    pub to: Side,
    pub message: InBandMessage,
}

#[derive(Debug, Default)]
struct Leg {
    session: Option<SessionState>,
    pending_secret: Option<ShortSecret>,
    honest_verdict: Option<Verdict>,
}

/// Man-in-the-middle sitting between the initiator (side A) and the responder (side B).
#[derive(Debug)]
pub struct Adversary {
    cfg: AdversaryConfig,
    rng: ChaCha20Rng,
    leg_a: Leg,
    leg_b: Leg,
}

impl Adversary {
    pub fn new<R: RngCore + ?Sized>(cfg: AdversaryConfig, rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self { cfg, rng: ChaCha20Rng::from_seed(seed), leg_a: Leg::default(), leg_b: Leg::default() }
    }

    pub fn config(&self) -> &AdversaryConfig {
        &self.cfg
    }

    /// Verdict the honest endpoint on `side` announced, if seen.
    pub fn honest_verdict(&self, side: Side) -> Option<Verdict> {
        self.leg(side).honest_verdict
    }

    /// Phase of the adversary's own session facing `side`.
    pub fn leg_phase(&self, side: Side) -> Option<Phase> {
        self.leg(side).session.as_ref().map(|s| s.phase())
    }

    pub fn leg_session_key(&self, side: Side) -> Option<[u8; 32]> {
        self.leg(side).session.as_ref().and_then(|s| s.session_key().copied())
    }

    fn leg(&self, side: Side) -> &Leg {
        match side {
            Side::A => &self.leg_a,
            Side::B => &self.leg_b,
        }
    }

    fn leg_mut(&mut self, side: Side) -> &mut Leg {
        match side {
            Side::A => &mut self.leg_a,
            Side::B => &mut self.leg_b,
        }
    }

    /// Handles one frame received from `from`.
    pub fn mitm_transform(&mut self, from: Side, frame: InBandMessage) -> Vec<Routed> {
        if let Some(v) = frame.verdict() {
            self.leg_mut(from).honest_verdict = Some(v);
        }
        match self.cfg.kind {
            AdversaryKind::None => vec![Routed { to: from.other(), message: frame }],
            AdversaryKind::RandomGuess => {
                let mut frame = frame;
                if frame.kind == MessageKind::ChkOpen && frame.payload.len() >= CHECK_LEN {
                    self.rng.fill_bytes(&mut frame.payload[..CHECK_LEN]);
                }
                vec![Routed { to: from.other(), message: frame }]
            }
            AdversaryKind::KeySubstitution | AdversaryKind::OobEavesdrop => self.substitute(from, frame),
        }
    }

    fn substitute(&mut self, from: Side, frame: InBandMessage) -> Vec<Routed> {
        let mut out = Vec::new();
        if from == Side::A && frame.kind == MessageKind::Hello && self.leg_a.session.is_none() {
            let Ok(hello) = HelloPayload::decode(&frame.payload) else {
                return out;
            };
            let mut towards_a = hello.config.clone();
            towards_a.role = hello.config.role.peer();
            let towards_b = hello.config;
            let towards_b_bits = towards_b.secret_bits;
            let (Ok(sa), Ok(sb)) = (init_session(towards_a, &mut self.rng), init_session(towards_b, &mut self.rng)) else {
                return out;
            };
            self.leg_a.session = Some(sa);
            self.leg_b.session = Some(sb);
            if !self.cfg.observes_oob {
                // Blind adversary: one uniform guess, used toward both sides.
                let guess = random_secret(towards_b_bits, &mut self.rng).expect("validated by init_session");
                self.leg_a.pending_secret = Some(guess.clone());
                self.leg_b.pending_secret = Some(guess);
            }
            out.extend(self.drive(Side::B, SessionInput::Start));
        }
        out.extend(self.drive(from, SessionInput::Message(frame)));
        out
    }

    /// The honest device on `side` has obtained its out-of-band secret and an
    /// eavesdropping adversary saw `observed`. Blind adversaries ignore this.
    pub fn observe_oob(&mut self, side: Side, observed: &ShortSecret) -> Vec<Routed> {
        if !self.cfg.kind.substitutes_keys() || !self.cfg.observes_oob {
            return Vec::new();
        }
        self.leg_mut(side).pending_secret = Some(observed.clone());
        self.flush_pending(side)
    }

    /// Eavesdropper view of a signal schedule: decodes the secret it carries
    /// and uses it toward both sides.
    pub fn observe_signals(&mut self, schedule: &SignalSchedule) -> Vec<Routed> {
        let Some(cfg) = self.leg_b.session.as_ref().map(|s| s.config().clone()) else {
            return Vec::new();
        };
        let ideal = PressTrace::from_instants(&schedule.events, 1);
        let Ok(secret) = decode_presses(&ideal, &cfg.timing, cfg.secret_bits) else {
            return Vec::new();
        };
        let mut out = self.observe_oob(Side::A, &secret);
        out.extend(self.observe_oob(Side::B, &secret));
        out
    }

    /// Eavesdropper view of button-to-button presses.
    pub fn observe_btb_presses(&mut self, trace: &PressTrace) -> Vec<Routed> {
        let Some(cfg) = self.leg_b.session.as_ref().map(|s| s.config().clone()) else {
            return Vec::new();
        };
        let Ok(secret) = quantize_btb(trace, &cfg.timing) else {
            return Vec::new();
        };
        let mut out = self.observe_oob(Side::A, &secret);
        out.extend(self.observe_oob(Side::B, &secret));
        out
    }

    fn drive(&mut self, side: Side, input: SessionInput) -> Vec<Routed> {
        let Some(session) = self.leg_mut(side).session.as_mut() else {
            return Vec::new();
        };
        if session.is_terminal() {
            return Vec::new();
        }
        let msgs = match session.step(input) {
            Ok(m) => m,
            Err(_) if session.phase() == Phase::Aborted => vec![InBandMessage::result(Verdict::Abort)],
            Err(_) => Vec::new(),
        };
        let mut out: Vec<Routed> = msgs.into_iter().map(|message| Routed { to: side, message }).collect();
        out.extend(self.flush_pending(side));
        out
    }

    fn flush_pending(&mut self, side: Side) -> Vec<Routed> {
        let leg = self.leg_mut(side);
        let ready = leg.session.as_ref().is_some_and(|s| s.phase() == Phase::OobWait);
        if !ready {
            return Vec::new();
        }
        match leg.pending_secret.take() {
            Some(s) => self.drive(side, SessionInput::OobSecretReady(s)),
            None => Vec::new(),
        }
    }
}
