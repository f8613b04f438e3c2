//! Devices, capabilities, pairing methods and test scenarios.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actors::{AdversaryConfig, HumanSpec};
use crate::coding::{SignalChannel, TimingParams, BITS_PER_INTERVAL};
use crate::transport::LinkProfile;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("{method} needs {missing:?} on device {device:?}")]
    CapabilityMismatch { device: String, method: PairingMethod, missing: Vec<Capability> },
    #[error("secret length {0} is not a positive multiple of 3")]
    BadSecretLength(usize),
    #[error("invalid timing parameters: {0}")]
    BadTiming(String),
    #[error("no candidate methods")]
    EmptyCandidates,
    #[error("invalid device: {0}")]
    InvalidDevice(String),
    #[error("invalid human model: {0}")]
    InvalidHuman(String),
    #[error("invalid adversary: {0}")]
    InvalidAdversary(String),
    #[error("repetitions must be positive")]
    BadRepetitions,
    #[error("invalid priority table: {0}")]
    BadPriorityTable(String),
    #[error("unknown pairing method {0:?}")]
    UnknownMethod(String),
}

/// Hardware features a virtual device can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Button,
    Display,
    Led,
    Speaker,
    Microphone,
    Camera,
    Vibration,
    Accelerometer,
}

impl Capability {
    pub const ALL: [Capability; 8] = [
        Capability::Button,
        Capability::Display,
        Capability::Led,
        Capability::Speaker,
        Capability::Microphone,
        Capability::Camera,
        Capability::Vibration,
        Capability::Accelerometer,
    ];
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CapabilitySet(BTreeSet<Capability>);

impl CapabilitySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, c: Capability) -> bool {
        self.0.contains(&c)
    }

    pub fn insert(&mut self, c: Capability) -> bool {
        self.0.insert(c)
    }

    pub fn iter(&self) -> impl Iterator<Item = Capability> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn missing(&self, required: &[Capability]) -> Vec<Capability> {
        required.iter().copied().filter(|c| !self.contains(*c)).collect()
    }

    /// Builds a set from the bits of `mask`, one bit per entry of [`Capability::ALL`].
    pub fn from_mask(mask: u8) -> Self {
        Capability::ALL.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, c)| *c).collect()
    }
}

impl FromIterator<Capability> for CapabilitySet {
    fn from_iter<I: IntoIterator<Item = Capability>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<const N: usize> From<[Capability; N]> for CapabilitySet {
    fn from(caps: [Capability; N]) -> Self {
        caps.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PairingMethod {
    #[serde(rename = "b2b")]
    BtoB,
    #[serde(rename = "d2b")]
    DtoB,
    #[serde(rename = "led2b")]
    LedToB,
    #[serde(rename = "beep2b")]
    BeepToB,
}

impl PairingMethod {
    pub const ALL: [PairingMethod; 4] = [PairingMethod::BtoB, PairingMethod::DtoB, PairingMethod::LedToB, PairingMethod::BeepToB];

    /// Short code used in files and on the wire.
    pub fn code(self) -> &'static str {
        match self {
            PairingMethod::BtoB => "b2b",
            PairingMethod::DtoB => "d2b",
            PairingMethod::LedToB => "led2b",
            PairingMethod::BeepToB => "beep2b",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PairingMethod::BtoB => "Button-to-Button",
            PairingMethod::DtoB => "Display-to-Button",
            PairingMethod::LedToB => "LED-to-Button",
            PairingMethod::BeepToB => "Beep-to-Button",
        }
    }

    /// Capabilities the button-side device needs.
    pub fn button_side(self) -> &'static [Capability] {
        &[Capability::Button]
    }

    /// Capabilities the signalling device needs.
    pub fn signal_side(self) -> &'static [Capability] {
        match self {
            PairingMethod::BtoB => &[Capability::Button],
            PairingMethod::DtoB => &[Capability::Display],
            PairingMethod::LedToB => &[Capability::Led],
            PairingMethod::BeepToB => &[Capability::Speaker],
        }
    }

    /// Out-of-band output channel, `None` for button-to-button.
    pub fn signal_channel(self) -> Option<SignalChannel> {
        match self {
            PairingMethod::BtoB => None,
            PairingMethod::DtoB => Some(SignalChannel::Display),
            PairingMethod::LedToB => Some(SignalChannel::Led),
            PairingMethod::BeepToB => Some(SignalChannel::Speaker),
        }
    }
}

impl fmt::Display for PairingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for PairingMethod {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PairingMethod::ALL.into_iter().find(|m| m.code() == s).ok_or_else(|| ModelError::UnknownMethod(s.to_string()))
    }
}

/// Which device emits the out-of-band signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Both devices take button input (button-to-button).
    Symmetric,
    ASignals,
    BSignals,
}

impl Direction {
    pub fn mirrored(self) -> Self {
        match self {
            Direction::Symmetric => Direction::Symmetric,
            Direction::ASignals => Direction::BSignals,
            Direction::BSignals => Direction::ASignals,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub capabilities: CapabilitySet,
}

impl DeviceSpec {
    pub fn new(name: impl Into<String>, capabilities: impl Into<CapabilitySet>) -> Self {
        Self { name: name.into(), capabilities: capabilities.into() }
    }
}

/// Ranking over methods, highest priority first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PairingMethod>", into = "Vec<PairingMethod>")]
pub struct PriorityTable(Vec<PairingMethod>);

impl PriorityTable {
    pub fn new(order: Vec<PairingMethod>) -> Result<Self, ModelError> {
        if order.len() != PairingMethod::ALL.len() {
            return Err(ModelError::BadPriorityTable(format!("expected 4 methods, got {}", order.len())));
        }
        for m in PairingMethod::ALL {
            if !order.contains(&m) {
                return Err(ModelError::BadPriorityTable(format!("{m} missing")));
            }
        }
        Ok(Self(order))
    }

    /// Position in the table, 0 is highest.
    pub fn rank(&self, m: PairingMethod) -> usize {
        self.0.iter().position(|x| *x == m).expect("table is total")
    }

    pub fn order(&self) -> &[PairingMethod] {
        &self.0
    }
}

impl Default for PriorityTable {
    fn default() -> Self {
        Self(vec![PairingMethod::BtoB, PairingMethod::DtoB, PairingMethod::BeepToB, PairingMethod::LedToB])
    }
}

impl TryFrom<Vec<PairingMethod>> for PriorityTable {
    type Error = ModelError;

    fn try_from(v: Vec<PairingMethod>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<PriorityTable> for Vec<PairingMethod> {
    fn from(t: PriorityTable) -> Self {
        t.0
    }
}

/// One test scenario. `device_a` is the initiator and always the button side;
/// `device_b` is the responder and emits the signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub method: PairingMethod,
    pub device_a: DeviceSpec,
    pub device_b: DeviceSpec,
    #[serde(default = "default_secret_bits")]
    pub secret_bits: usize,
    #[serde(default)]
    pub timing: TimingParams,
    #[serde(default)]
    pub human: HumanSpec,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default)]
    pub transport: LinkProfile,
}

pub const DEFAULT_SECRET_BITS: usize = 21;

fn default_secret_bits() -> usize {
    DEFAULT_SECRET_BITS
}

fn default_repetitions() -> u32 {
    1
}

impl Scenario {
    /// A scenario with default timing, calibrated human and no adversary.
    pub fn new(name: impl Into<String>, method: PairingMethod, device_a: DeviceSpec, device_b: DeviceSpec) -> Self {
        Self {
            name: name.into(),
            method,
            device_a,
            device_b,
            secret_bits: DEFAULT_SECRET_BITS,
            timing: TimingParams::default(),
            human: HumanSpec::default(),
            adversary: AdversaryConfig::default(),
            repetitions: 1,
            transport: LinkProfile::default(),
        }
    }

    /// Minimal devices for `method`: a button-only initiator and a responder
    /// with exactly the signal capability.
    pub fn minimal(name: impl Into<String>, method: PairingMethod) -> Self {
        let a = DeviceSpec::new("alice", method.button_side().iter().copied().collect::<CapabilitySet>());
        let b = DeviceSpec::new("bob", method.signal_side().iter().copied().collect::<CapabilitySet>());
        Self::new(name, method, a, b)
    }
}

/// Every (method, direction) the two devices can run.
pub fn feasible_methods(a: &CapabilitySet, b: &CapabilitySet) -> BTreeSet<(PairingMethod, Direction)> {
    let covers = |set: &CapabilitySet, req: &[Capability]| req.iter().all(|c| set.contains(*c));
    let mut out = BTreeSet::new();
    for m in PairingMethod::ALL {
        let a_buttons_b_signals = covers(a, m.button_side()) && covers(b, m.signal_side());
        let b_buttons_a_signals = covers(b, m.button_side()) && covers(a, m.signal_side());
        if m == PairingMethod::BtoB {
            if a_buttons_b_signals {
                out.insert((m, Direction::Symmetric));
            }
            continue;
        }
        if a_buttons_b_signals {
            out.insert((m, Direction::BSignals));
        }
        if b_buttons_a_signals {
            out.insert((m, Direction::ASignals));
        }
    }
    out
}

/// Picks the candidate whose method ranks highest.
pub fn select_method(
    candidates: &BTreeSet<(PairingMethod, Direction)>,
    table: &PriorityTable,
) -> Result<(PairingMethod, Direction), ModelError> {
    candidates.iter().copied().min_by_key(|(m, d)| (table.rank(*m), *d)).ok_or(ModelError::EmptyCandidates)
}

pub fn validate_scenario(s: Scenario) -> Result<Scenario, ModelError> {
    for dev in [&s.device_a, &s.device_b] {
        if dev.name.trim().is_empty() {
            return Err(ModelError::InvalidDevice("device name is empty".into()));
        }
    }
    if s.device_a.name == s.device_b.name {
        return Err(ModelError::InvalidDevice(format!("duplicate device name {:?}", s.device_a.name)));
    }
    for (dev, req) in [(&s.device_a, s.method.button_side()), (&s.device_b, s.method.signal_side())] {
        let missing = dev.capabilities.missing(req);
        if !missing.is_empty() {
            return Err(ModelError::CapabilityMismatch { device: dev.name.clone(), method: s.method, missing });
        }
    }
    if s.secret_bits == 0 || !s.secret_bits.is_multiple_of(BITS_PER_INTERVAL) {
        return Err(ModelError::BadSecretLength(s.secret_bits));
    }
    s.timing.validate().map_err(|e| ModelError::BadTiming(e.to_string()))?;
    if let HumanSpec::Model(m) = &s.human {
        m.validate(&s.timing).map_err(|e| ModelError::InvalidHuman(e.to_string()))?;
    }
    s.adversary.validate().map_err(|e| ModelError::InvalidAdversary(e.to_string()))?;
    if s.repetitions == 0 {
        return Err(ModelError::BadRepetitions);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Capability::*;

    fn set<const N: usize>(c: [Capability; N]) -> CapabilitySet {
        c.into()
    }

    #[test]
    fn eight_capabilities() {
        let distinct: BTreeSet<_> = Capability::ALL.into_iter().collect();
        assert_eq!(distinct.len(), 8);
    }

    #[test]
    fn feasible_button_only_vs_rich_signaller() {
        let got = feasible_methods(&set([Button]), &set([Display, Led, Speaker]));
        let want: BTreeSet<_> = [
            (PairingMethod::DtoB, Direction::BSignals),
            (PairingMethod::LedToB, Direction::BSignals),
            (PairingMethod::BeepToB, Direction::BSignals),
        ]
        .into_iter()
        .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn feasible_degenerate_cases() {
        assert!(feasible_methods(&set([]), &set([Button, Display])).is_empty());
        let got = feasible_methods(&set([Button]), &set([Button]));
        assert_eq!(got.into_iter().collect::<Vec<_>>(), vec![(PairingMethod::BtoB, Direction::Symmetric)]);
    }

    #[test]
    fn select_examples() {
        let table = PriorityTable::default();
        let cands: BTreeSet<_> = [
            (PairingMethod::DtoB, Direction::BSignals),
            (PairingMethod::LedToB, Direction::BSignals),
            (PairingMethod::BeepToB, Direction::BSignals),
        ]
        .into_iter()
        .collect();
        assert_eq!(select_method(&cands, &table).unwrap().0, PairingMethod::DtoB);

        let single: BTreeSet<_> = [(PairingMethod::BtoB, Direction::Symmetric)].into_iter().collect();
        let reversed = PriorityTable::new(PairingMethod::ALL.into_iter().rev().collect()).unwrap();
        assert_eq!(select_method(&single, &reversed).unwrap().0, PairingMethod::BtoB);

        let two: BTreeSet<_> =
            [(PairingMethod::LedToB, Direction::BSignals), (PairingMethod::BeepToB, Direction::BSignals)].into_iter().collect();
        assert_eq!(select_method(&two, &table).unwrap().0, PairingMethod::BeepToB);

        assert_eq!(select_method(&BTreeSet::new(), &table), Err(ModelError::EmptyCandidates));
    }

    #[test]
    fn priority_table_must_be_total() {
        assert!(PriorityTable::new(vec![PairingMethod::BtoB]).is_err());
        assert!(PriorityTable::new(vec![PairingMethod::BtoB, PairingMethod::BtoB, PairingMethod::DtoB, PairingMethod::LedToB]).is_err());
        let parsed: PriorityTable = serde_json::from_str(r#"["b2b","d2b","beep2b","led2b"]"#).unwrap();
        assert_eq!(parsed, PriorityTable::default());
    }

    #[test]
    fn validate_examples() {
        let mut s = Scenario::minimal("d", PairingMethod::DtoB);
        s.device_b.capabilities = set([Led]);
        assert!(matches!(validate_scenario(s), Err(ModelError::CapabilityMismatch { .. })));

        let mut s = Scenario::minimal("d", PairingMethod::DtoB);
        s.secret_bits = 20;
        assert_eq!(validate_scenario(s), Err(ModelError::BadSecretLength(20)));

        let s = Scenario::minimal("d", PairingMethod::DtoB);
        assert_eq!(validate_scenario(s.clone()).unwrap(), s);

        let mut s = Scenario::minimal("d", PairingMethod::DtoB);
        s.timing.quantum_ms = 0;
        assert!(matches!(validate_scenario(s), Err(ModelError::BadTiming(_))));

        let mut s = Scenario::minimal("d", PairingMethod::DtoB);
        s.device_b.name = s.device_a.name.clone();
        assert!(matches!(validate_scenario(s), Err(ModelError::InvalidDevice(_))));
    }

    #[test]
    fn scenario_json_uses_method_codes() {
        let json = r#"{
            "name": "led run",
            "method": "led2b",
            "device_a": {"name": "a", "capabilities": ["button"]},
            "device_b": {"name": "b", "capabilities": ["led", "speaker"]}
        }"#;
        let s: Scenario = serde_json::from_str(json).unwrap();
        assert_eq!(s.method, PairingMethod::LedToB);
        assert_eq!(s.secret_bits, DEFAULT_SECRET_BITS);
        assert_eq!(s.repetitions, 1);
        validate_scenario(s).unwrap();
        assert_eq!("beep2b".parse::<PairingMethod>().unwrap(), PairingMethod::BeepToB);
        assert!("pdf".parse::<PairingMethod>().is_err());
    }
}
