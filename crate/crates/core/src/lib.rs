//! Simulation and live-test harness for button-based device pairing methods.

pub mod actors;
pub mod coding;
pub mod engine;
pub mod interactive;
pub mod metrics;
pub mod model;
pub mod oob;
pub mod protocol;
pub mod remote;
pub mod transport;

pub use actors::{AdversaryConfig, AdversaryKind, ChannelResponse, HumanModel, HumanSpec};
pub use coding::{PressTrace, ShortSecret, SignalChannel, SignalSchedule, TimingParams};
pub use engine::{run_batch, run_trial, EventLog, Outcome, TrialMode, TrialRecord};
pub use metrics::{export, summarize, MetricsSummary};
pub use model::{Capability, CapabilitySet, DeviceSpec, PairingMethod, Scenario};
pub use protocol::{InBandMessage, MessageKind, Phase, Role, SessionConfig, SessionState, Verdict};
pub use transport::{Frame, LinkProfile};
