//! Interval coding of short secrets.
//!
//! A signal-side device turns each 3-bit group `v` of the secret into a gap of
//! `t_min + v * quantum` between consecutive signals. The button-side device
//! recovers the groups from the gaps between the human's presses. Because only
//! gaps are measured, a constant reaction latency cancels out.
//!
//! Button-to-button pairing has no encoder: the human picks the gaps and both
//! devices quantize what they observe with `round(gap / quantum) mod 8`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bits carried by one interval.
pub const BITS_PER_INTERVAL: usize = 3;

/// Largest group value.
const MAX_GROUP: u64 = (1 << BITS_PER_INTERVAL) - 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodingError {
    #[error("secret length {0} is not a positive multiple of 3")]
    BadSecretLength(usize),
    #[error("invalid timing parameters: {0}")]
    BadTiming(String),
    #[error("expected {expected} presses, got {got}")]
    PressCountMismatch { expected: usize, got: usize },
    #[error("at least two presses are needed to form an interval")]
    TooFewPresses,
    #[error("invalid bit string: {0}")]
    BadBitString(String),
}

/// Timing parameters shared by encoder, decoder and the human models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingParams {
    pub quantum_ms: u64,
    pub t_min_ms: u64,
    pub signal_duration_ms: u64,
    pub debounce_ms: u64,
    pub response_timeout_ms: u64,
    pub trial_timeout_ms: u64,
}

impl Default for TimingParams {
    fn default() -> Self {
        Self {
            quantum_ms: 200,
            t_min_ms: 300,
            signal_duration_ms: 150,
            debounce_ms: 50,
            response_timeout_ms: 3_000,
            trial_timeout_ms: 60_000,
        }
    }
}

impl TimingParams {
    /// Longest gap an encoder can produce.
    pub fn max_gap_ms(&self) -> u64 {
        self.t_min_ms + MAX_GROUP * self.quantum_ms
    }

    pub fn validate(&self) -> Result<(), CodingError> {
        let bad = |msg: &str| Err(CodingError::BadTiming(msg.to_string()));
        if self.quantum_ms == 0 {
            return bad("quantum_ms must be positive");
        }
        if self.t_min_ms < self.quantum_ms {
            return bad("t_min_ms must be at least quantum_ms");
        }
        if self.signal_duration_ms >= self.t_min_ms {
            return bad("signal_duration_ms must be below t_min_ms");
        }
        if self.response_timeout_ms <= self.max_gap_ms() {
            return bad("response_timeout_ms must exceed t_min_ms + 7 * quantum_ms");
        }
        Ok(())
    }
}

/// A k-bit secret, k a positive multiple of 3.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ShortSecret {
    bits: Vec<bool>,
}

impl ShortSecret {
    pub fn from_bits(bits: Vec<bool>) -> Result<Self, CodingError> {
        check_len(bits.len())?;
        Ok(Self { bits })
    }

    /// Builds a secret from 3-bit group values, most significant bit first.
    pub fn from_groups(groups: &[u8]) -> Result<Self, CodingError> {
        let mut bits = Vec::with_capacity(groups.len() * BITS_PER_INTERVAL);
        for &g in groups {
            if u64::from(g) > MAX_GROUP {
                return Err(CodingError::BadBitString(format!("group value {g} exceeds 7")));
            }
            for shift in (0..BITS_PER_INTERVAL).rev() {
                bits.push((g >> shift) & 1 == 1);
            }
        }
        Self::from_bits(bits)
    }

    /// Interprets the low `k` bits of `value` as a secret, MSB first.
    pub fn from_u64(value: u64, k: usize) -> Result<Self, CodingError> {
        if k > 64 {
            return Err(CodingError::BadSecretLength(k));
        }
        let bits = (0..k).rev().map(|i| (value >> i) & 1 == 1).collect();
        Self::from_bits(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn groups(&self) -> impl Iterator<Item = u8> + '_ {
        self.bits.chunks(BITS_PER_INTERVAL).map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | u8::from(b)))
    }

    /// Canonical byte encoding used for hashing: 4-byte big-endian bit count
    /// followed by one byte (0 or 1) per bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.bits.len());
        out.extend_from_slice(&(self.bits.len() as u32).to_be_bytes());
        out.extend(self.bits.iter().map(|&b| u8::from(b)));
        out
    }
}

fn check_len(k: usize) -> Result<(), CodingError> {
    if k == 0 || !k.is_multiple_of(BITS_PER_INTERVAL) {
        return Err(CodingError::BadSecretLength(k));
    }
    Ok(())
}

impl fmt::Display for ShortSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for ShortSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ShortSecret({self})")
    }
}

impl FromStr for ShortSecret {
    type Err = CodingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(CodingError::BadBitString(format!("unexpected character {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_bits(bits)
    }
}

impl Serialize for ShortSecret {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ShortSecret {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Output channel of a signal-side device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalChannel {
    Display,
    Led,
    #[serde(rename = "beep")]
    Speaker,
}

/// Emission timestamps relative to the start of the out-of-band phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalSchedule {
    pub events: Vec<u64>,
    pub channel: SignalChannel,
}

impl SignalSchedule {
    pub fn last(&self) -> u64 {
        self.events.last().copied().unwrap_or(0)
    }

    pub fn shifted(&self, offset_ms: u64) -> Self {
        Self { events: self.events.iter().map(|t| t + offset_ms).collect(), channel: self.channel }
    }
}

/// One button press as `[press_ms, release_ms]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u64; 2]", into = "[u64; 2]")]
pub struct Press {
    pub press_ms: u64,
    pub release_ms: u64,
}

impl From<[u64; 2]> for Press {
    fn from([press_ms, release_ms]: [u64; 2]) -> Self {
        Self { press_ms, release_ms }
    }
}

impl From<Press> for [u64; 2] {
    fn from(p: Press) -> Self {
        [p.press_ms, p.release_ms]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PressTrace {
    pub events: Vec<Press>,
}

impl PressTrace {
    /// Presses at the given instants, each held for `hold_ms`.
    pub fn from_instants(instants: &[u64], hold_ms: u64) -> Self {
        let events = instants.iter().map(|&t| Press { press_ms: t, release_ms: t + hold_ms.max(1) }).collect();
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn press_times(&self) -> impl Iterator<Item = u64> + '_ {
        self.events.iter().map(|e| e.press_ms)
    }

    /// Sorts by press time and merges any press that starts within
    /// `debounce_ms` of the previous kept press.
    pub fn debounced(mut self, debounce_ms: u64) -> Self {
        self.events.sort_by_key(|e| (e.press_ms, e.release_ms));
        let mut out: Vec<Press> = Vec::with_capacity(self.events.len());
        for e in self.events {
            match out.last_mut() {
                Some(prev) if e.press_ms - prev.press_ms < debounce_ms => {
                    prev.release_ms = prev.release_ms.max(e.release_ms);
                }
                _ => out.push(e),
            }
        }
        Self { events: out }
    }

    /// Keeps only the first `n` presses.
    pub fn truncated(mut self, n: usize) -> Self {
        self.events.truncate(n);
        self
    }

    fn gaps(&self) -> impl Iterator<Item = u64> + '_ {
        self.events.windows(2).map(|w| w[1].press_ms.saturating_sub(w[0].press_ms))
    }
}

/// Draws `k` uniform bits.
pub fn random_secret<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<ShortSecret, CodingError> {
    check_len(k)?;
    let bits = (0..k).map(|_| rng.random::<bool>()).collect();
    Ok(ShortSecret { bits })
}

pub fn encode_schedule(secret: &ShortSecret, p: &TimingParams, channel: SignalChannel) -> SignalSchedule {
    let mut events = Vec::with_capacity(secret.len() / BITS_PER_INTERVAL + 1);
    let mut t = 0u64;
    events.push(t);
    for v in secret.groups() {
        t += p.t_min_ms + u64::from(v) * p.quantum_ms;
        events.push(t);
    }
    SignalSchedule { events, channel }
}

/// Recovers a secret from presses that follow an encoded schedule.
pub fn decode_presses(trace: &PressTrace, p: &TimingParams, expected_k: usize) -> Result<ShortSecret, CodingError> {
    check_len(expected_k)?;
    let expected = expected_k / BITS_PER_INTERVAL + 1;
    if trace.len() != expected {
        return Err(CodingError::PressCountMismatch { expected, got: trace.len() });
    }
    let q = p.quantum_ms as f64;
    let t_min = p.t_min_ms as f64;
    let groups: Vec<u8> = trace.gaps().map(|g| ((g as f64 - t_min) / q).round().clamp(0.0, MAX_GROUP as f64) as u8).collect();
    ShortSecret::from_groups(&groups)
}

/// Quantizes human-chosen button-to-button gaps.
pub fn quantize_btb(trace: &PressTrace, p: &TimingParams) -> Result<ShortSecret, CodingError> {
    if trace.len() < 2 {
        return Err(CodingError::TooFewPresses);
    }
    let q = p.quantum_ms as f64;
    let groups: Vec<u8> = trace.gaps().map(|g| ((g as f64 / q).round() as u64 % (MAX_GROUP + 1)) as u8).collect();
    ShortSecret::from_groups(&groups)
}
