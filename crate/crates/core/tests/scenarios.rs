use std::path::PathBuf;

use splitmachine::mailbox::{DomainId, MsgLimit};
use splitmachine::protocol::resource;
use splitmachine::scenarios::{self, Program, RunOptions, ScenarioSpec, BUILTIN};
use splitmachine::trace::EventKind;
use splitmachine::Machine;

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn builtins_pass() {
    for name in BUILTIN {
        let run = scenarios::run(&ScenarioSpec::builtin(name).unwrap(), &RunOptions::default());
        assert!(run.result.passed, "{name}: {:?}", run.result.first_failure);
        assert!(run.result.checks.iter().all(|c| c.passed));
        assert_eq!(run.trace.first().map(|e| e.event), Some(EventKind::PowerOn), "{name}");
    }
}

#[test]
fn shipped_files_match_builtins_and_pass() {
    let mut seen = 0;
    for entry in std::fs::read_dir(scenario_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let spec = scenarios::load(path.to_str().unwrap()).unwrap();
        if let Some(b) = ScenarioSpec::builtin(&spec.name) {
            assert_eq!(spec, b, "{} differs from the built-in", path.display());
        }
        let run = scenarios::run(&spec, &RunOptions::default());
        assert!(run.result.passed, "{}: {:?}", path.display(), run.result.first_failure);
        seen += 1;
    }
    assert!(seen > BUILTIN.len());
}

#[test]
fn tampered_banking_rejects_attestation() {
    let spec = scenarios::load(scenario_dir().join("banking_tampered.json").to_str().unwrap()).unwrap();
    assert!(spec.expect_attest_reject);
    let run = scenarios::run(&spec, &RunOptions::default());
    assert!(run.result.passed);
    let transfers = run.result.check("bank saw the expected transfers").unwrap();
    assert_eq!(transfers.detail, "[]");
}

#[test]
fn any_seed_passes() {
    for seed in [1, 2, 0xdead_beef] {
        for name in ["banking", "insulin"] {
            let run = scenarios::run(&ScenarioSpec::builtin(name).unwrap(), &RunOptions { seed, ..RunOptions::default() });
            assert!(run.result.passed, "{name} seed {seed}: {:?}", run.result.first_failure);
        }
    }
}

#[test]
fn contention_gap_follows_session_length() {
    let spec = ScenarioSpec { session_ticks: vec![30, 120], ..ScenarioSpec::builtin("contention").unwrap() };
    let run = scenarios::run(&spec, &RunOptions::default());
    assert!(run.result.passed, "{:?}", run.result.first_failure);
    let gaps: Vec<u64> = run.result.metrics["gaps"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["gap"].as_u64().unwrap())
        .collect();
    assert_eq!(gaps, [30, 120]);
}

#[test]
fn tick_budget_is_enforced() {
    let run = scenarios::run(&ScenarioSpec::builtin("insulin").unwrap(), &RunOptions { max_ticks: 500, ..RunOptions::default() });
    assert!(!run.result.passed);
    assert!(run.result.first_failure.is_some());
}

#[test]
fn storage_survives_back_to_back_sessions() {
    let mut m = Machine::default_machine();
    m.boot(100_000).unwrap();
    let mut p = Program::new(DomainId(1), 7);
    let data: Vec<u8> = (0..700u32).map(|i| (i * 31 % 251) as u8).collect();

    let mut s = p.open(&mut m, resource::STORAGE, MsgLimit::Finite(64), 600).unwrap();
    p.rt.storage_write(&mut m, &mut s, 3, &data).unwrap();
    p.rt.end_session(&mut m, &mut s).unwrap();

    let mut s = p.open(&mut m, resource::STORAGE, MsgLimit::Finite(64), 600).unwrap();
    let back = p.rt.storage_read(&mut m, &mut s, 3, 2).unwrap();
    p.rt.end_session(&mut m, &mut s).unwrap();

    assert_eq!(&back[..data.len()], &data[..]);
    assert!(back[data.len()..].iter().all(|&b| b == 0));
}

#[test]
fn injected_faults_are_detected() {
    let cases = [
        ("rm-preinject", "stale-domain"),
        ("rm-skip-reset", "stale-domain"),
        ("rm-shortchange", "status-mismatch"),
        ("link-down", "link-down"),
        ("tamper-image:bankapp", "verifier rejected attestation"),
        ("tamper-image:serial-out", "PcrMismatch"),
        ("missing-image:network", "BootAborted"),
    ];
    for (fault, symptom) in cases {
        let mut opts = RunOptions::default();
        opts.faults.apply(fault).unwrap();
        let run = scenarios::run(&ScenarioSpec::builtin("banking").unwrap(), &opts);
        assert!(!run.result.passed, "{fault} went unnoticed");
        let details: Vec<&str> = run.result.checks.iter().filter(|c| !c.passed).map(|c| c.detail.as_str()).collect();
        assert!(details.iter().any(|d| d.contains(symptom)), "{fault}: {details:?}");
    }
}
