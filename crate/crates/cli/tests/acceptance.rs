//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use pairsim_core::coding::{decode_presses, encode_schedule, random_secret, PressTrace, ShortSecret, SignalChannel, TimingParams};
use pairsim_core::engine::{run_trial, EventLog, Outcome, TrialMode, TrialRecord};
use pairsim_core::metrics::summarize;
use pairsim_core::protocol::{init_session, InBandMessage, Phase, Role, SessionConfig, SessionInput, SessionState, GROUP_X25519};
use pairsim_core::{AdversaryConfig, AdversaryKind, HumanModel, HumanSpec, PairingMethod, Scenario};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

type Check = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn(&Path) -> Check,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pairsim")
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn pairsim(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(bin()).args(args).output().map_err(|e| e.to_string())
}

// Safe-error rates as printed in the published results table.
const PRINTED_FN_PCT: [(PairingMethod, f64); 4] =
    [(PairingMethod::BtoB, 6.666667), (PairingMethod::DtoB, 20.0), (PairingMethod::BeepToB, 33.333336), (PairingMethod::LedToB, 36.666668)];

fn metrics_fixture(dir: &Path) -> Check {
    let failures = [(PairingMethod::BtoB, 2), (PairingMethod::DtoB, 6), (PairingMethod::BeepToB, 10), (PairingMethod::LedToB, 11)];
    let log: EventLog = failures
        .iter()
        .flat_map(|&(m, f)| {
            (0..30u64).map(move |i| {
                let mut r = TrialRecord::for_scenario(&Scenario::minimal("fixture", m), i, TrialMode::Headless);
                r.duration_ms = 8_000 + 100 * i;
                r.outcome = if i < f { Outcome::SafeError } else { Outcome::Success };
                r
            })
        })
        .collect();
    let (input, out) = (dir.join("fixture.jsonl"), dir.join("fixture.json"));
    log.save(&input).map_err(|e| e.to_string())?;
    let run = pairsim(&["report", "--in", input.to_str().unwrap(), "--format", "json", "--out", out.to_str().unwrap()])?;
    ensure(run.status.success(), || format!("report failed: {}", String::from_utf8_lossy(&run.stderr)))?;
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (m, printed) in PRINTED_FN_PCT {
        let row = json["methods"].as_array().unwrap().iter().find(|r| r["method"] == m.code()).ok_or(format!("{m} missing"))?;
        let got = row["fn_pct"].as_f64().unwrap();
        worst = worst.max((got - printed).abs());
        ensure((got - printed).abs() <= 1e-4, || format!("{m}: fn_pct {got} vs printed {printed}"))?;
        ensure(row["n"] == 30, || format!("{m}: n = {}", row["n"]))?;
    }
    Ok(format!("max |fn_pct - printed| = {worst:.2e}"))
}

fn ideal_decode(s: &ShortSecret, p: &TimingParams, ch: SignalChannel, shift: u64) -> Option<ShortSecret> {
    let sched = encode_schedule(s, p, ch).shifted(shift);
    decode_presses(&PressTrace::from_instants(&sched.events, 100), p, s.len()).ok()
}

fn coding_round_trip(_: &Path) -> Check {
    let p = TimingParams::default();
    let channels = [SignalChannel::Display, SignalChannel::Led, SignalChannel::Speaker];
    let shifts = [0u64, 1, 37, 250, 60_000];
    let mut n = 0usize;
    for k in [3usize, 6, 9] {
        for v in 0..1u64 << k {
            let s = ShortSecret::from_u64(v, k).unwrap();
            for ch in channels {
                for shift in shifts {
                    ensure(ideal_decode(&s, &p, ch, shift).as_ref() == Some(&s), || format!("k={k} secret {s} {ch:?} shift {shift}"))?;
                    n += 1;
                }
            }
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    for _ in 0..1_000 {
        let s = random_secret(21, &mut rng).unwrap();
        for (ch, shift) in channels.into_iter().zip(shifts) {
            ensure(ideal_decode(&s, &p, ch, shift).as_ref() == Some(&s), || format!("k=21 secret {s} {ch:?} shift {shift}"))?;
            n += 1;
        }
    }
    Ok(format!("{n} encode/decode round trips"))
}

fn exchange(a: &mut SessionState, b: &mut SessionState, first: Vec<InBandMessage>, from_a: bool) -> Result<(), String> {
    let mut wire: Vec<(bool, InBandMessage)> = first.into_iter().map(|m| (from_a, m)).collect();
    while !wire.is_empty() {
        let (to_b, m) = wire.remove(0);
        let target = if to_b { &mut *b } else { &mut *a };
        let out = target.step(SessionInput::Message(m)).map_err(|e| e.to_string())?;
        wire.extend(out.into_iter().map(|m| (!to_b, m)));
    }
    Ok(())
}

fn safe_error_totality(_: &Path) -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(64);
    let (mut accepted, mut rejected) = (0, 0);
    for x in 0..8u64 {
        for y in 0..8u64 {
            let (sa, sb) = (ShortSecret::from_u64(x, 3).unwrap(), ShortSecret::from_u64(y, 3).unwrap());
            let cfg = |r| SessionConfig::new(r, PairingMethod::DtoB, TimingParams::default(), 3).with_group(GROUP_X25519);
            let mut a = init_session(cfg(Role::Initiator), &mut rng).map_err(|e| e.to_string())?;
            let mut b = init_session(cfg(Role::Responder), &mut rng).map_err(|e| e.to_string())?;
            let hello = a.step(SessionInput::Start).map_err(|e| e.to_string())?;
            exchange(&mut a, &mut b, hello, true)?;
            let out = b.step(SessionInput::OobSecretReady(sb.clone())).map_err(|e| e.to_string())?;
            exchange(&mut a, &mut b, out, false)?;
            let out = a.step(SessionInput::OobSecretReady(sa.clone())).map_err(|e| e.to_string())?;
            exchange(&mut a, &mut b, out, true)?;
            let phases = (a.phase(), b.phase());
            if x == y {
                ensure(phases == (Phase::Accepted, Phase::Accepted), || format!("{x}={y} ended {phases:?}"))?;
                ensure(a.session_key().is_some() && a.session_key() == b.session_key(), || format!("{x}: session keys differ"))?;
                accepted += 1;
            } else {
                ensure(phases == (Phase::Rejected, Phase::Rejected), || format!("{x}!={y} ended {phases:?}"))?;
                rejected += 1;
            }
        }
    }
    Ok(format!("{accepted} equal pairs accepted, {rejected} unequal pairs rejected"))
}

fn attack_scenario(kind: AdversaryKind) -> Scenario {
    let mut s = Scenario::minimal("mitm", PairingMethod::DtoB);
    s.secret_bits = 3;
    s.human = HumanSpec::Model(HumanModel::ideal());
    s.adversary = AdversaryConfig::for_attack(kind);
    s
}

fn accepted(r: &TrialRecord) -> bool {
    r.phase_a == Some(Phase::Accepted) || r.phase_b == Some(Phase::Accepted)
}

fn mitm_bound(_: &Path) -> Check {
    const N: u64 = 10_000;
    let blind = attack_scenario(AdversaryKind::KeySubstitution);
    let mut hits = 0u64;
    for i in 0..N {
        let r = run_trial(&blind, i).map_err(|e| e.to_string())?;
        if accepted(&r) {
            ensure(r.outcome == Outcome::FatalError, || format!("accepted substitution classified {:?}", r.outcome))?;
            hits += 1;
        }
    }
    let rate = hits as f64 / N as f64;
    ensure((rate - 0.125).abs() <= 0.01, || format!("blind acceptance rate {rate}"))?;
    let seeing = attack_scenario(AdversaryKind::OobEavesdrop);
    for i in 0..N {
        let r = run_trial(&seeing, i).map_err(|e| e.to_string())?;
        ensure(accepted(&r) && r.outcome == Outcome::FatalError, || format!("observing adversary trial {i}: {:?}", r.outcome))?;
    }
    Ok(format!("blind acceptance {rate:.4}; observing adversary accepted {N}/{N}, all fatal"))
}

fn method_ordering(_: &Path) -> Check {
    const N: u64 = 2_000;
    let mut log = EventLog::new();
    for m in PairingMethod::ALL {
        let s = Scenario::minimal("order", m);
        for i in 0..N {
            log.append(run_trial(&s, i * 4 + m as u64).map_err(|e| e.to_string())?);
        }
    }
    let summary = summarize(&log).map_err(|e| e.to_string())?;
    let get = |m| summary.get(m).unwrap();
    let (b2b, d2b, beep, led) =
        (get(PairingMethod::BtoB), get(PairingMethod::DtoB), get(PairingMethod::BeepToB), get(PairingMethod::LedToB));
    let detail = format!(
        "fn% b2b {:.2} d2b {:.2} beep {:.2} led {:.2}; mean s b2b {:.2} d2b {:.2} beep {:.2} led {:.2}",
        b2b.fn_pct, d2b.fn_pct, beep.fn_pct, led.fn_pct, b2b.mean_s, d2b.mean_s, beep.mean_s, led.mean_s
    );
    ensure(b2b.fn_pct < d2b.fn_pct && d2b.fn_pct <= beep.fn_pct && beep.fn_pct <= led.fn_pct, || format!("ordering broken: {detail}"))?;
    ensure(summary.methods.iter().all(|s| b2b.mean_s <= s.mean_s), || format!("b2b not fastest: {detail}"))?;
    Ok(detail)
}

/// Drops the `"wall_time":"...",` field from every line, leaving all other bytes.
fn strip_wall_time(bytes: &[u8]) -> String {
    const KEY: &str = "\"wall_time\":\"";
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| match l.find(KEY) {
            Some(start) => {
                let end = start + KEY.len() + l[start + KEY.len()..].find("\",").map_or(0, |i| i + 2);
                format!("{}{}", &l[..start], &l[end..])
            }
            None => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism(dir: &Path) -> Check {
    let six = scenarios_dir().join("six.json");
    let mut logs = Vec::new();
    for run in 0..2 {
        let out = dir.join(format!("six-{run}.jsonl"));
        let r = pairsim(&["run", "--batch", six.to_str().unwrap(), "--seed", "42", "--out", out.to_str().unwrap()])?;
        ensure(r.status.success(), || format!("run failed: {}", String::from_utf8_lossy(&r.stderr)))?;
        logs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    let lines = logs[0].iter().filter(|&&b| b == b'\n').count();
    ensure(lines == 6, || format!("expected 6 records, got {lines}"))?;
    let (a, b) = (strip_wall_time(&logs[0]), strip_wall_time(&logs[1]));
    ensure(!a.contains("wall_time") && a == b, || "logs differ outside wall_time".into())?;
    Ok(format!("{lines} records, {} bytes identical after removing wall_time", a.len()))
}

/// Spawns `pairsim` and returns the child plus its first stdout line.
fn spawn_listening(args: &[&str]) -> Result<(Child, String), String> {
    let mut child = Command::new(bin()).args(args).stdout(Stdio::piped()).stderr(Stdio::inherit()).spawn().map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
    ensure(line.starts_with("listening "), || format!("unexpected banner {line:?}"))?;
    Ok((child, line))
}

fn local(addr: &str) -> String {
    addr.replace("0.0.0.0", "127.0.0.1")
}

fn wait_ok(mut child: Child, what: &str) -> Result<(), String> {
    let status = child.wait().map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("{what} exited with {status}"))
}

fn remote_scenario(dir: &Path, reps: u32) -> Result<PathBuf, String> {
    let mut s = Scenario::minimal("remote", PairingMethod::DtoB);
    s.human = HumanSpec::Model(HumanModel::ideal());
    s.repetitions = reps;
    let path = dir.join(format!("remote-{reps}.json"));
    std::fs::write(&path, serde_json::to_vec(&s).unwrap()).map_err(|e| e.to_string())?;
    Ok(path)
}

fn remote_mode(dir: &Path) -> Check {
    // Direct pairing between two processes.
    let file = remote_scenario(dir, 1)?;
    let file = file.to_str().unwrap();
    let (b_out, a_out) = (dir.join("direct-b.jsonl"), dir.join("direct-a.jsonl"));
    let (responder, banner) = spawn_listening(&["peer", "--listen", "0", "--scenario", file, "--out", b_out.to_str().unwrap()])?;
    let parts: Vec<&str> = banner.split_whitespace().collect();
    let (inband, oob) = (local(parts[1]), local(parts[3]));
    let r = pairsim(&["peer", "--connect", &inband, "--oob-connect", &oob, "--scenario", file, "--out", a_out.to_str().unwrap()])?;
    ensure(r.status.success(), || format!("initiator failed: {}", String::from_utf8_lossy(&r.stderr)))?;
    wait_ok(responder, "responder")?;
    for out in [&a_out, &b_out] {
        let log = EventLog::load(out).map_err(|e| e.to_string())?;
        ensure(log.records().iter().all(|r| r.outcome == Outcome::Success) && log.len() == 1, || {
            format!("{}: {:?}", out.display(), log.records())
        })?;
    }

    // The same pairing through a key-substituting relay.
    const N: u32 = 100;
    let file = remote_scenario(dir, N)?;
    let file = file.to_str().unwrap();
    let a_out = dir.join("relayed-a.jsonl");
    let (responder, banner) = spawn_listening(&["peer", "--listen", "0", "--scenario", file])?;
    let parts: Vec<&str> = banner.split_whitespace().collect();
    let (inband, oob) = (local(parts[1]), local(parts[3]));
    let (relay, banner) = spawn_listening(&["mitm", "--listen", "0", "--forward", &inband, "--attack", "key_substitution"])?;
    let relay_addr = local(banner.split_whitespace().nth(1).unwrap());
    let r = pairsim(&["peer", "--connect", &relay_addr, "--oob-connect", &oob, "--scenario", file, "--out", a_out.to_str().unwrap()])?;
    ensure(r.status.success(), || format!("initiator failed: {}", String::from_utf8_lossy(&r.stderr)))?;
    wait_ok(responder, "responder")?;
    wait_ok(relay, "relay")?;
    let log = EventLog::load(&a_out).map_err(|e| e.to_string())?;
    let rejected = log.records().iter().filter(|r| r.phase_a == Some(Phase::Rejected)).count();
    ensure(log.len() == N as usize, || format!("{} of {N} sessions logged", log.len()))?;
    ensure(rejected * 100 >= 95 * N as usize, || format!("only {rejected}/{N} rejected"))?;
    Ok(format!("direct pairing succeeded; {rejected}/{N} relayed sessions rejected"))
}

fn main() {
    let criteria = [
        Criterion { name: "metrics pipeline matches printed safe-error rates", limit: Some(Duration::from_secs(1)), run: metrics_fixture },
        Criterion { name: "coding round trip with shift invariance", limit: Some(Duration::from_secs(5)), run: coding_round_trip },
        Criterion {
            name: "safe-error totality over all 3-bit secret pairs",
            limit: Some(Duration::from_secs(5)),
            run: safe_error_totality,
        },
        Criterion { name: "key substitution acceptance bound", limit: Some(Duration::from_secs(60)), run: mitm_bound },
        Criterion { name: "method error ordering and fastest method", limit: Some(Duration::from_secs(120)), run: method_ordering },
        Criterion { name: "batch run determinism", limit: None, run: determinism },
        Criterion { name: "remote pairing over TCP and through a relay", limit: Some(Duration::from_secs(60)), run: remote_mode },
    ];
    let dir = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    for c in criteria {
        let start = Instant::now();
        let result = (c.run)(dir.path());
        let took = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if took > limit => Err(format!("took {took:.2?}, limit {limit:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS  {:<52} {took:>9.2?}  {detail}", c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:<52} {took:>9.2?}  {why}", c.name);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
