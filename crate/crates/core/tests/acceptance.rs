//! Acceptance suite, one test per criterion. Each prints a PASS/FAIL line
//! (visible with `--nocapture`).

use std::collections::BTreeSet;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

use splitmachine::crypto::{ae_open, ae_seal};
use splitmachine::harness::{self, Bounds, Counterexample, PropertyId, ReplayOutcome};
use splitmachine::mailbox::{DomainId, Mutant};
use splitmachine::manifest::{DeviceKind, MachineManifest};
use splitmachine::protocol::Frame;
use splitmachine::scenarios::{self, RunOptions, ScenarioSpec};
use splitmachine::tcb::{Component, Guarantee};
use splitmachine::trace::{write_jsonl, EventKind, TraceEvent};
use splitmachine::Machine;

const CHECK_BUDGET: Duration = Duration::from_secs(60);
const MAX_CEX_LEN: usize = 8;
const FRESHNESS_TRIALS: u32 = 100;
const GAP_TOLERANCE: u64 = 1;
const CONTENTION_K: [u64; 3] = [10, 50, 200];
const MAX_PAYLOAD: usize = 508;
const AE_MUTATIONS: usize = 1000;
const INSULIN_SESSIONS: usize = 5;

type Outcome = Result<String, String>;

fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

fn builtin(name: &str) -> ScenarioSpec {
    ScenarioSpec::builtin(name).expect("built-in scenario")
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let r = harness::explore(&Bounds::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let numbered: BTreeSet<u8> = r.properties.iter().filter_map(|p| p.invariant()).collect();
    if numbered != (1..=13).collect() {
        return Err(format!("checked invariants {numbered:?}"));
    }
    for p in [PropertyId::ResetGuard, PropertyId::ArbiterExclusive] {
        if !r.properties.contains(&p) {
            return Err(format!("{p} not checked"));
        }
    }
    if !r.violations.is_empty() {
        return Err(format!("{} violations, first {}", r.violations.len(), r.violations[0].property));
    }
    if elapsed > CHECK_BUDGET {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!("{} states, {} transitions, 0 violations in {:.2}s", r.states_explored, r.transitions, elapsed.as_secs_f64()))
}

fn criterion_2() -> Outcome {
    let mut lens = Vec::new();
    for m in Mutant::ALL {
        let r = harness::explore_mutant(&Bounds::default(), Some(m)).map_err(|e| e.to_string())?;
        let c = r.shortest().ok_or_else(|| format!("{m:?} not caught"))?;
        if c.len() > MAX_CEX_LEN {
            return Err(format!("{m:?}: shortest counterexample has {} actions", c.len()));
        }
        let back = Counterexample::from_json(&c.to_json()).map_err(|e| e.to_string())?;
        if harness::replay(&back) != ReplayOutcome::Confirmed {
            return Err(format!("{m:?}: replay did not reproduce {}", c.property));
        }
        lens.push(format!("{m:?}={}", c.len()));
    }
    Ok(format!("all {} caught, lengths {}", Mutant::ALL.len(), lens.join(" ")))
}

fn criterion_3() -> Outcome {
    let run = scenarios::run(&builtin("boot"), &RunOptions::default());
    if !run.result.passed {
        return Err(format!("boot scenario failed: {:?}", run.result.first_failure));
    }
    let manifest = MachineManifest::default_machine();
    let loads: Vec<&TraceEvent> = run.trace.iter().filter(|e| e.event == EventKind::ImageLoaded).collect();
    let order: Vec<DomainId> = loads.iter().filter_map(|e| e.domain).collect();
    let storage = manifest.device_domain(DeviceKind::Storage).ok_or("no storage domain")?;
    if order.len() != manifest.domains.len() || order[0] != storage || order[1] != DomainId::RESOURCE_MANAGER {
        return Err(format!("launch order {order:?}"));
    }
    let rest: BTreeSet<DomainId> = order[2..].iter().copied().collect();
    if rest.len() != manifest.domains.len() - 2 {
        return Err(format!("launch order {order:?}"));
    }

    // Reference: PCR = SHA-256(32 zero bytes || SHA-256(image)), computed here.
    let mut m = Machine::default_machine();
    m.boot(100_000).map_err(|e| format!("{e:?}"))?;
    for d in &manifest.domains {
        let image = manifest.image(&d.image).ok_or("missing image")?;
        let want = sha256(&[&[0u8; 32], &sha256(&[&image.bytes])]);
        // A service that has already served a request carries one freshness
        // extension on top of its boot value.
        let used = sha256(&[&want, &[0xF5u8; 32]]);
        let got = m.hw().pcr_of(d.id).ok_or("no PCR")?;
        if got.0 != want && got.0 != used {
            return Err(format!("domain {} PCR {} expected {}", d.id, got.to_hex(), hex::encode(want)));
        }
        let logged = loads.iter().find(|e| e.domain == Some(d.id)).map(|e| e.detail.clone()).unwrap_or_default();
        if !logged.ends_with(&format!("pcr={}", hex::encode(want))) {
            return Err(format!("trace for domain {} says {logged}", d.id));
        }
    }
    Ok(format!("order {order:?}; {} PCRs match the reference hash", manifest.domains.len()))
}

fn criterion_4() -> Outcome {
    let spec = ScenarioSpec { trials: FRESHNESS_TRIALS, ..builtin("freshness") };
    let run = scenarios::run(&spec, &RunOptions::default());
    let stale = run.result.metrics.get("stale").and_then(|v| v.as_u64()).unwrap_or(0);
    let fp = run.result.metrics.get("false_positives").and_then(|v| v.as_u64()).unwrap_or(u64::MAX);
    let line = format!("{stale}/{FRESHNESS_TRIALS} stale-domain, {fp}/{FRESHNESS_TRIALS} false positives");
    if stale == u64::from(FRESHNESS_TRIALS) && fp == 0 && run.result.passed {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Ticks during which the untrusted domain has a storage request queued
/// while TEE1 holds storage, counted tick by tick from one machine's trace.
fn gap_by_ticks(trace: &[TraceEvent]) -> u64 {
    let end = trace.last().map_or(0, |e| e.tick + 1);
    let mut waiting = vec![false; end as usize];
    let mut holding = vec![false; end as usize];
    let mut wait_from = None;
    let mut hold_from = None;
    for e in trace {
        let d = e.detail.as_str();
        match e.event {
            EventKind::RequestQueued if d == "7 resource 0x03" => wait_from = Some(e.tick),
            EventKind::Granted if d.starts_with("7 resource 0x03") => {
                if let Some(s) = wait_from.take() {
                    (s..e.tick).for_each(|t| waiting[t as usize] = true);
                }
            }
            EventKind::Granted if d.starts_with("1 resource 0x03") => hold_from = Some(e.tick),
            EventKind::SessionExpired | EventKind::Yielded if e.mailbox.map(|m| m.0) == Some(4) && e.domain == Some(DomainId(1)) => {
                if let Some(s) = hold_from.take() {
                    (s..e.tick).for_each(|t| holding[t as usize] = true);
                }
            }
            _ => {}
        }
    }
    waiting.iter().zip(&holding).filter(|(w, h)| **w && **h).count() as u64
}

fn criterion_5() -> Outcome {
    let spec = ScenarioSpec { session_ticks: CONTENTION_K.iter().map(|&k| k as u32).collect(), ..builtin("contention") };
    let run = scenarios::run(&spec, &RunOptions::default());
    let machines: Vec<&[TraceEvent]> = {
        let starts: Vec<usize> =
            run.trace.iter().enumerate().filter(|(_, e)| e.event == EventKind::PowerOn).map(|(i, _)| i).collect();
        starts.iter().enumerate().map(|(j, &s)| &run.trace[s..starts.get(j + 1).copied().unwrap_or(run.trace.len())]).collect()
    };
    if machines.len() != CONTENTION_K.len() {
        return Err(format!("{} machine traces", machines.len()));
    }
    let mut parts = Vec::new();
    for (&k, t) in CONTENTION_K.iter().zip(machines) {
        let gap = gap_by_ticks(t);
        parts.push(format!("K={k} gap={gap}"));
        if gap.abs_diff(k) > GAP_TOLERANCE {
            return Err(parts.join(", "));
        }
    }
    if !run.result.passed {
        return Err(format!("scenario failed: {:?}", run.result.first_failure));
    }
    Ok(parts.join(", "))
}

fn cli_exit(args: &[&str]) -> Option<i32> {
    Command::new(env!("CARGO_BIN_EXE_splitmachine")).args(args).output().ok()?.status.code()
}

fn criterion_6() -> Outcome {
    let required = [
        "unauthorized-read",
        "unauthorized-write",
        "status-snoop",
        "reset-attempt",
        "stale-reuse",
        "ui-hijack",
        "pump-hijack",
    ];
    let mut seen = BTreeSet::new();
    let mut attempts = 0;
    for name in ["banking", "insulin"] {
        let code = cli_exit(&["run", name]);
        if code != Some(0) {
            return Err(format!("`run {name}` exited {code:?}"));
        }
        let run = scenarios::run(&builtin(name), &RunOptions::default());
        if !run.result.passed {
            return Err(format!("{name}: {:?}", run.result.first_failure));
        }
        for a in &run.result.attacks {
            if !a.blocked {
                return Err(format!("{name}: attack {} succeeded", a.attempt));
            }
            seen.insert(a.category.clone());
            attempts += 1;
        }
        if name == "insulin" {
            let n = run.result.metrics.get("history").and_then(|h| h.as_array()).map_or(0, |h| h.len());
            let kept = run.result.check("history persists across sessions").is_some_and(|c| c.passed);
            if n != INSULIN_SESSIONS || !kept {
                return Err(format!("insulin history has {n} entries"));
            }
        }
    }
    let missing: Vec<&str> = required.iter().copied().filter(|c| !seen.contains(*c)).collect();
    if !missing.is_empty() {
        return Err(format!("no attack of kind {missing:?}"));
    }
    Ok(format!("both exit 0; {attempts} attacks in {} categories all failed; history kept over {INSULIN_SESSIONS} sessions", seen.len()))
}

fn criterion_7() -> Outcome {
    use Component::*;
    let formula: BTreeSet<Component> = [Prog, Mailbox, ResetGuard, Arbiter, RoT].into_iter().collect();
    let bank = scenarios::run(&builtin("banking"), &RunOptions::default()).result.tcb.ok_or("no banking report")?;
    for g in [Guarantee::C, Guarantee::I, Guarantee::As] {
        if bank.strong(g) != formula {
            return Err(format!("banking {g:?} strong {:?}", bank.strong(g)));
        }
    }
    let insulin = scenarios::run(&builtin("insulin"), &RunOptions::default()).result.tcb.ok_or("no insulin report")?;
    let ag = insulin.strong(Guarantee::Ag);
    let mut want = formula.clone();
    want.extend([Rm, Sd]);
    if ag != want {
        return Err(format!("insulin Ag strong {ag:?}"));
    }
    if bank.strong(Guarantee::Ag).contains(&Rm) {
        return Err("banking places RM in Ag".into());
    }
    Ok(format!("banking {bank}; insulin {insulin}"))
}

fn criterion_8() -> Outcome {
    let mut sizes = Vec::new();
    for name in scenarios::BUILTIN {
        let render = || {
            let run = scenarios::run(&builtin(name), &RunOptions::default());
            let mut out = Vec::new();
            write_jsonl(&run.trace, &mut out).expect("write to memory");
            out
        };
        let (a, b) = (render(), render());
        if a != b {
            return Err(format!("{name}: traces differ"));
        }
        sizes.push(format!("{name}={}B", a.len()));
    }
    Ok(format!("identical traces: {}", sizes.join(" ")))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    for len in 0..=MAX_PAYLOAD {
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let f = Frame::new(rng.random(), payload);
        let bytes = f.encode();
        if bytes.len() != len + 4 || Frame::decode(&bytes).as_ref() != Ok(&f) {
            return Err(format!("round trip failed at payload {len}"));
        }
    }
    let key: [u8; 32] = rng.random();
    let nonce: [u8; 12] = rng.random();
    let msg: Vec<u8> = (0..96).map(|_| rng.random()).collect();
    let sealed = ae_seal(&key, &nonce, &msg);
    if ae_open(&key, &sealed).as_deref() != Ok(&msg[..]) {
        return Err("seal/open round trip failed".into());
    }
    let mut rejected = 0;
    for _ in 0..AE_MUTATIONS {
        let mut bad = sealed.clone();
        let at = rng.random_range(0..bad.len());
        bad[at] ^= rng.random_range(1..=255u8);
        if ae_open(&key, &bad).is_err() {
            rejected += 1;
        }
    }
    let line = format!("payloads 0..={MAX_PAYLOAD} round-trip; {rejected}/{AE_MUTATIONS} mutations rejected");
    if rejected == AE_MUTATIONS {
        Ok(line)
    } else {
        Err(line)
    }
}

fn report(n: u8, name: &str, outcome: Outcome) {
    match outcome {
        Ok(detail) => println!("criterion {n}: PASS {name}: {detail}"),
        Err(detail) => {
            println!("criterion {n}: FAIL {name}: {detail}");
            panic!("criterion {n} failed: {detail}");
        }
    }
}

macro_rules! criteria {
    ($($test:ident => ($n:literal, $name:literal, $f:ident)),* $(,)?) => {
        $(
            #[test]
            fn $test() {
                report($n, $name, $f());
            }
        )*
    };
}

criteria! {
    c1_mailbox_properties_hold_at_default_bounds => (1, "mailbox, reset guard and arbiter properties hold at default bounds", criterion_1),
    c2_every_mutant_caught => (2, "every mutant caught with a short replayable counterexample", criterion_2),
    c3_boot_order_and_measurements => (3, "boot order and measurements", criterion_3),
    c4_injected_frames_detected => (4, "injected pre-session frames detected", criterion_4),
    c5_contention_gap_tracks_session => (5, "contention gap tracks the session length", criterion_5),
    c6_banking_and_insulin_with_attacks => (6, "banking and insulin scenarios with attacks", criterion_6),
    c7_tcb_report => (7, "trusted computing base report", criterion_7),
    c8_deterministic_traces => (8, "deterministic traces", criterion_8),
    c9_codec_and_sealed_box => (9, "frame codec and authenticated encryption", criterion_9),
}
