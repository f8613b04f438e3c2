use pairsim_core::actors::{AdversaryConfig, AdversaryKind, ChannelResponse, HumanModel, HumanSpec};
use pairsim_core::engine::{run_trial, Outcome, TrialRecord};
use pairsim_core::model::{PairingMethod, Scenario};
use pairsim_core::protocol::Phase;
use pairsim_core::transport::LinkProfile;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const TRIALS: u64 = 100_000;

fn fuzzed_scenario(rng: &mut ChaCha20Rng) -> Scenario {
    let method = PairingMethod::ALL[rng.random_range(0..4)];
    let mut s = Scenario::minimal("fuzz", method);
    s.secret_bits = 3 * rng.random_range(1..=7);
    let mut human = HumanModel::default();
    for ch in [&mut human.display, &mut human.led, &mut human.beep] {
        *ch = ChannelResponse::new(rng.random_range(0.0..400.0), rng.random_range(0.0..150.0), rng.random_range(0.0..0.3));
    }
    human.btb_skew_sd_ms = rng.random_range(0.0..40.0);
    human.spurious_prob_per_s = rng.random_range(0.0..0.05);
    s.human = HumanSpec::Model(human);
    s.adversary = match rng.random_range(0..5) {
        0 => AdversaryConfig::for_attack(AdversaryKind::RandomGuess),
        1 => AdversaryConfig::for_attack(AdversaryKind::KeySubstitution),
        2 => AdversaryConfig::for_attack(AdversaryKind::OobEavesdrop),
        _ => AdversaryConfig::default(),
    };
    s.transport =
        LinkProfile { latency_ms: rng.random_range(0..80), loss: if rng.random_bool(0.05) { rng.random_range(0.0..0.5) } else { 0.0 } };
    s
}

fn check(s: &Scenario, r: &TrialRecord) {
    let (a, b) = (r.phase_a.unwrap(), r.phase_b.unwrap());
    assert!(a.is_terminal() && b.is_terminal(), "non-terminal end: {r:?}");
    assert!(r.duration_ms <= s.timing.trial_timeout_ms);
    let any_accept = a == Phase::Accepted || b == Phase::Accepted;
    match r.outcome {
        Outcome::Success => {
            assert_eq!((a, b), (Phase::Accepted, Phase::Accepted));
            assert_eq!(s.adversary.kind, AdversaryKind::None, "{r:?}");
        }
        Outcome::FatalError => assert!(any_accept),
        Outcome::SafeError => {
            assert!(!s.adversary.kind.substitutes_keys());
            assert!(a != Phase::Aborted && b != Phase::Aborted);
        }
        Outcome::Abort => {}
    }
    if s.adversary.kind.substitutes_keys() && any_accept {
        assert_eq!(r.outcome, Outcome::FatalError);
    }
}

#[test]
fn every_fuzzed_trial_lands_in_exactly_one_outcome() {
    let mut rng = ChaCha20Rng::seed_from_u64(0xf022);
    let mut counts = [0u64; 4];
    for i in 0..TRIALS {
        let s = fuzzed_scenario(&mut rng);
        let r = run_trial(&s, i).unwrap();
        check(&s, &r);
        counts[r.outcome as usize] += 1;
    }
    assert_eq!(counts.iter().sum::<u64>(), TRIALS);
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
}
