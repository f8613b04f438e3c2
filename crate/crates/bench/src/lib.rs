//! Inputs shared by the benchmarks.

use pairsim_core::engine::{EventLog, Outcome, TrialMode, TrialRecord};
use pairsim_core::{PairingMethod, Scenario};

/// A log with `per_method` records for each method and a spread of outcomes
/// and durations.
pub fn synthetic_log(per_method: usize) -> EventLog {
    PairingMethod::ALL
        .into_iter()
        .flat_map(|m| {
            (0..per_method).map(move |i| {
                let mut r = TrialRecord::for_scenario(&Scenario::minimal("bench", m), i as u64, TrialMode::Headless);
                r.duration_ms = 5_000 + (i as u64 * 7_919) % 10_000;
                r.outcome = [Outcome::Success, Outcome::Success, Outcome::Success, Outcome::SafeError][i % 4];
                r
            })
        })
        .collect()
}
