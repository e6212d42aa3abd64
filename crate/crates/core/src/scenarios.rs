//! End-to-end scenarios: boot, the banking and insulin programs, storage
//! contention and injected pre-session frames.
//!
//! A scenario builds a machine, boots it, drives TEE programs through the
//! runtime and lets the untrusted workload attack at chosen points. Every
//! hostile attempt is recorded and must fail for the scenario to pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attestation::{boot_pcr, Nonce, NONCE_LEN};
use crate::crypto::{self, ae_open, ae_seal, Digest};
use crate::firmware::Firmware;
use crate::io_services::{ports, Ports};
use crate::mailbox::{DomainId, MsgLimit, Tick};
use crate::manifest::{self, DeviceKind, MachineManifest, TEE1, TEE2};
use crate::peers::{ae_nonce, app_secret, pkt, provider_key, session_key, Bank, HealthServer, Responder, Verifier};
use crate::platform::{DmaDir, Faults, Machine, ResetError};
use crate::protocol::{op, purpose, resource, ErrCode, Frame, RmRequest};
use crate::resource_manager::lookup_resource;
use crate::tcb::{tcb_report, TcbReport};
use crate::tee_runtime::{Session, TeeError, TeeRuntime};
use crate::trace::{EventKind, TraceEvent};
use crate::untrusted_compat::{Action, Script, UntrustedOs};

pub const BUILTIN: [&str; 5] = ["boot", "banking", "insulin", "contention", "freshness"];
pub const DEFAULT_MAX_TICKS: Tick = 200_000;
const NET_WAIT: Tick = 64;
const SETTLE: Tick = 200;

/// Insulin dosing: `clamp((glucose - TARGET) / STEP, 0, MAX_DOSE)` units.
pub const TARGET_GLUCOSE: u16 = 120;
pub const GLUCOSE_PER_UNIT: u16 = 10;
pub const MAX_DOSE: u16 = 10;

pub fn dose_for(glucose: u16) -> u16 {
    (glucose.saturating_sub(TARGET_GLUCOSE) / GLUCOSE_PER_UNIT).min(MAX_DOSE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Boot,
    Banking,
    Insulin,
    Contention,
    Freshness,
}

/// Scenario file contents. Fields not used by a kind are ignored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub kind: ScenarioKind,
    /// Adds the glucose sensor and insulin pump domains.
    #[serde(default)]
    pub medical: bool,
    #[serde(default)]
    pub faults: Vec<String>,
    /// Background script of the untrusted domain.
    #[serde(default)]
    pub workload: Script,
    #[serde(default)]
    pub secret: String,
    #[serde(default)]
    pub credential: String,
    #[serde(default)]
    pub transfer: String,
    /// The verifier expects a different program; the run passes only if
    /// attestation is rejected.
    #[serde(default)]
    pub expect_attest_reject: bool,
    #[serde(default)]
    pub glucose: Vec<u16>,
    #[serde(default)]
    pub periods: u32,
    #[serde(default)]
    pub interval: Tick,
    /// Period in which the pump is attacked.
    #[serde(default)]
    pub attack_period: u32,
    /// TEE storage session lengths for the contention run.
    #[serde(default)]
    pub session_ticks: Vec<u32>,
    #[serde(default)]
    pub trials: u32,
}

impl ScenarioSpec {
    fn base(name: &str, kind: ScenarioKind) -> Self {
        ScenarioSpec {
            name: name.into(),
            kind,
            medical: false,
            faults: Vec::new(),
            workload: Script::default(),
            secret: String::new(),
            credential: String::new(),
            transfer: String::new(),
            expect_attest_reject: false,
            glucose: Vec::new(),
            periods: 0,
            interval: 0,
            attack_period: 0,
            session_ticks: Vec::new(),
            trials: 0,
        }
    }

    pub fn builtin(name: &str) -> Option<ScenarioSpec> {
        Some(match name {
            "boot" => Self::base("boot", ScenarioKind::Boot),
            "banking" => ScenarioSpec {
                secret: "blue-heron-42".into(),
                credential: "alice:correct horse".into(),
                transfer: "25 to bob".into(),
                workload: Script(vec![
                    Action::Write { block: 0, count: 1, fill: 0x5A },
                    Action::Read { block: 0, count: 1 },
                ]),
                ..Self::base("banking", ScenarioKind::Banking)
            },
            "insulin" => ScenarioSpec {
                medical: true,
                glucose: vec![180, 95, 240, 130, 410],
                periods: 5,
                interval: 1500,
                attack_period: 2,
                workload: Script(vec![Action::Spin { ticks: 20 }]),
                ..Self::base("insulin", ScenarioKind::Insulin)
            },
            "contention" => ScenarioSpec {
                session_ticks: vec![10, 50, 200],
                ..Self::base("contention", ScenarioKind::Contention)
            },
            "freshness" => ScenarioSpec { trials: 100, ..Self::base("freshness", ScenarioKind::Freshness) },
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Replaces the manifest the scenario would pick.
    pub manifest: Option<MachineManifest>,
    pub faults: Faults,
    pub max_ticks: Tick,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { manifest: None, faults: Faults::default(), max_ticks: DEFAULT_MAX_TICKS, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
    /// Index into the scenario trace when the check was made.
    pub trace_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub category: String,
    pub attempt: String,
    pub blocked: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub attacks: Vec<AttackOutcome>,
    /// Tick counts per phase.
    pub phases: BTreeMap<String, Tick>,
    pub first_failure: Option<Check>,
    #[serde(default)]
    pub metrics: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcb: Option<TcbReport>,
}

impl ScenarioResult {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn attacks_in<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a AttackOutcome> {
        self.attacks.iter().filter(move |a| a.category == category)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRun {
    pub result: ScenarioResult,
    /// Traces of every machine the scenario built, in order.
    pub trace: Vec<TraceEvent>,
    pub manifest: MachineManifest,
}

struct Recorder {
    result: ScenarioResult,
    trace: Vec<TraceEvent>,
}

impl Recorder {
    fn new(name: &str) -> Self {
        Recorder {
            result: ScenarioResult {
                name: name.into(),
                passed: false,
                checks: Vec::new(),
                attacks: Vec::new(),
                phases: BTreeMap::new(),
                first_failure: None,
                metrics: BTreeMap::new(),
                tcb: None,
            },
            trace: Vec::new(),
        }
    }

    fn offset(&self, m: Option<&Machine>) -> usize {
        self.trace.len() + m.map_or(0, |m| m.trace().len())
    }

    fn check(&mut self, m: Option<&Machine>, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> bool {
        let c = Check { name: name.into(), passed, detail: detail.into(), trace_offset: self.offset(m) };
        if !passed && self.result.first_failure.is_none() {
            self.result.first_failure = Some(c.clone());
        }
        self.result.checks.push(c);
        passed
    }

    fn attack(&mut self, category: &str, attempt: impl Into<String>, blocked: bool, detail: impl Into<String>) {
        self.result.attacks.push(AttackOutcome {
            category: category.into(),
            attempt: attempt.into(),
            blocked,
            detail: detail.into(),
        });
    }

    /// Records an attack driven from the scenario and marks it in the trace.
    fn direct_attack(&mut self, m: &mut Machine, category: &str, attempt: &str, blocked: bool, detail: String) {
        let verdict = if blocked { "failed" } else { "succeeded" };
        m.hw_mut().emit(EventKind::Attack, None, None, format!("{attempt}: {verdict} ({detail})"));
        self.attack(category, attempt, blocked, detail);
    }

    fn phase(&mut self, name: &str, ticks: Tick) {
        *self.result.phases.entry(name.into()).or_default() += ticks;
    }

    fn metric(&mut self, name: &str, v: Value) {
        self.result.metrics.insert(name.into(), v);
    }

    fn absorb(&mut self, m: Machine) {
        self.trace.extend_from_slice(m.trace());
    }

    fn finish(mut self, manifest: MachineManifest) -> ScenarioRun {
        if let Some(a) = self.result.attacks.iter().find(|a| !a.blocked) {
            let offset = self.trace.len();
            let c = Check {
                name: format!("attack blocked: {}", a.attempt),
                passed: false,
                detail: a.detail.clone(),
                trace_offset: offset,
            };
            if self.result.first_failure.is_none() {
                self.result.first_failure = Some(c.clone());
            }
            self.result.checks.push(c);
        }
        self.result.passed = !self.result.checks.is_empty() && self.result.first_failure.is_none();
        ScenarioRun { result: self.result, trace: self.trace, manifest }
    }
}

/// A TEE program: the runtime plus a deterministic nonce source and
/// bookkeeping of time spent verifying sessions.
#[derive(Debug)]
pub struct Program {
    pub rt: TeeRuntime,
    seed: u64,
    nonces: u64,
    pub verify_ticks: Tick,
}

impl Program {
    pub fn new(id: DomainId, seed: u64) -> Self {
        Program { rt: TeeRuntime::new(id), seed, nonces: 0, verify_ticks: 0 }
    }

    pub fn nonce(&mut self) -> Nonce {
        self.nonces += 1;
        let h = crypto::hash_parts(&[b"tee-nonce", &[self.rt.id.0], &self.seed.to_le_bytes(), &self.nonces.to_le_bytes()]);
        h.0[..NONCE_LEN].try_into().expect("16 of 32 bytes")
    }

    /// Requests `res` and verifies it against the image the manifest names
    /// for the serving domain.
    pub fn open(&mut self, m: &mut Machine, res: u8, msgs: MsgLimit, duration: u32) -> Result<Session, TeeError> {
        let expected = expected_image(m.hw().manifest(), self.rt.id, res).ok_or(TeeError::Denied)?;
        let ui = res == resource::SERIAL_IN || res == resource::SERIAL_OUT;
        let req = RmRequest { resource: res, msgs, duration, purpose: if ui { purpose::UI } else { purpose::GENERAL } };
        let nonce = self.nonce();
        let start = m.now();
        let s = self.rt.request_and_verify(m, req, expected, nonce);
        self.verify_ticks += m.now() - start;
        s
    }
}

/// Digest of the image the manifest installs in the domain serving `res`.
pub fn expected_image(manifest: &MachineManifest, requester: DomainId, res: u8) -> Option<Digest> {
    let r = lookup_resource(manifest, requester, res)?;
    let name = &manifest.domain(r.domain)?.image;
    Some(manifest.image(name)?.digest())
}

fn device_ports(m: &Machine, dev: DeviceKind) -> Option<(DomainId, Ports)> {
    let manifest = m.hw().manifest();
    let d = manifest.device_domain(dev)?;
    Some((d, ports(manifest, d)?))
}

fn untrusted_os(m: &mut Machine) -> Option<&mut UntrustedOs> {
    let u = m.hw().untrusted();
    m.program_mut(u).and_then(Firmware::as_untrusted_mut)
}

/// Hostile actions handed to the untrusted workload as one batch.
struct Batch {
    first: usize,
    labels: Vec<(&'static str, String)>,
}

fn launch(m: &mut Machine, attempts: Vec<(&'static str, &str, Action)>) -> Batch {
    let Some(os) = untrusted_os(m) else { return Batch { first: usize::MAX, labels: Vec::new() } };
    let first = os.script_len();
    let labels = attempts.iter().map(|(c, l, _)| (*c, l.to_string())).collect();
    os.enqueue(attempts.into_iter().map(|(_, _, a)| a));
    Batch { first, labels }
}

/// Steps the machine until the untrusted script is done or `limit` ticks pass.
fn settle(m: &mut Machine, limit: Tick) {
    let end = m.now() + limit;
    while m.now() < end && !untrusted_os(m).is_none_or(|os| os.finished()) {
        m.step();
    }
}

fn collect(r: &mut Recorder, m: &mut Machine, batch: Batch) {
    let results = untrusted_os(m).map(|os| os.results.clone()).unwrap_or_default();
    let done: Vec<_> = results.into_iter().filter(|x| x.index >= batch.first).collect();
    for (i, (category, label)) in batch.labels.into_iter().enumerate() {
        match done.get(i) {
            Some(x) => r.attack(category, label, !x.success, x.detail.clone()),
            None => r.attack(category, label, false, "attempt never completed".to_string()),
        }
    }
}

fn budget(m: &Machine, opts: &RunOptions) -> Result<(), String> {
    if m.now() > opts.max_ticks {
        Err(format!("tick budget of {} exhausted", opts.max_ticks))
    } else {
        Ok(())
    }
}

fn tee<T>(what: &str, r: Result<T, TeeError>) -> Result<T, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

fn build_machine(spec: &ScenarioSpec, opts: &RunOptions) -> Result<Machine, String> {
    let manifest = match &opts.manifest {
        Some(m) => m.clone(),
        None if spec.medical => MachineManifest::with_medical_devices(),
        None => MachineManifest::default_machine(),
    };
    let mut faults = opts.faults.clone();
    for f in &spec.faults {
        faults.apply(f)?;
    }
    let mut m = Machine::build_with(manifest, None, faults).map_err(|e| e.to_string())?;
    m.hw_mut().workload = spec.workload.clone();
    Ok(m)
}

fn boot(r: &mut Recorder, m: &mut Machine, opts: &RunOptions) -> Result<(), String> {
    let start = m.now();
    let res = m.boot(opts.max_ticks);
    r.phase("launch", m.now() - start);
    let ok = r.check(Some(m), "boot completes", res.is_ok(), format!("{res:?}"));
    if ok {
        Ok(())
    } else {
        Err("boot failed".into())
    }
}

/// Runs a scenario to completion. Never panics on scenario failure; the
/// outcome is in the result.
pub fn run(spec: &ScenarioSpec, opts: &RunOptions) -> ScenarioRun {
    match spec.kind {
        ScenarioKind::Boot => run_boot(spec, opts),
        ScenarioKind::Banking => run_banking(spec, opts),
        ScenarioKind::Insulin => run_insulin(spec, opts),
        ScenarioKind::Contention => run_contention(spec, opts),
        ScenarioKind::Freshness => run_freshness(spec, opts),
    }
}

fn single_machine(
    spec: &ScenarioSpec,
    opts: &RunOptions,
    body: impl FnOnce(&mut Recorder, &mut Machine) -> Result<(), String>,
) -> ScenarioRun {
    let mut r = Recorder::new(&spec.name);
    let mut m = match build_machine(spec, opts) {
        Ok(m) => m,
        Err(e) => {
            r.check(None, "machine builds", false, e);
            return r.finish(MachineManifest::default_machine());
        }
    };
    if let Err(e) = body(&mut r, &mut m) {
        r.check(Some(&m), "scenario runs to completion", false, e);
    }
    let manifest = m.hw().manifest().clone();
    r.absorb(m);
    r.finish(manifest)
}

// ---------------------------------------------------------------- boot

/// Boots and checks the launch order and the measurement of every domain.
pub fn run_boot(spec: &ScenarioSpec, opts: &RunOptions) -> ScenarioRun {
    single_machine(spec, opts, |r, m| {
        boot(r, m, opts)?;
        let manifest = m.hw().manifest().clone();
        let loads: Vec<(DomainId, String, String)> = m
            .trace()
            .iter()
            .filter(|e| e.event == EventKind::ImageLoaded)
            .filter_map(|e| {
                let (name, pcr) = e.detail.split_once(" pcr=")?;
                Some((e.domain?, name.to_string(), pcr.to_string()))
            })
            .collect();
        let order: Vec<DomainId> = loads.iter().map(|(d, _, _)| *d).collect();
        let storage = manifest.device_domain(DeviceKind::Storage);
        let rm = DomainId::RESOURCE_MANAGER;
        let mut rest: Vec<DomainId> = manifest.domains.iter().map(|d| d.id).filter(|&d| Some(d) != storage && d != rm).collect();
        rest.sort();
        let mut tail: Vec<DomainId> = order.iter().skip(2).copied().collect();
        tail.sort();
        let order_ok = order.first().copied() == storage && order.get(1) == Some(&rm) && tail == rest;
        r.check(Some(m), "launch order storage, manager, rest", order_ok, format!("{order:?}"));

        let mut pcrs = serde_json::Map::new();
        for (d, name, pcr) in &loads {
            let want = manifest.image(name).map(|i| boot_pcr(&i.digest()).to_hex());
            r.check(
                Some(m),
                format!("domain {d} measured as {name}"),
                want.as_deref() == Some(pcr.as_str()),
                pcr.clone(),
            );
            pcrs.insert(name.clone(), json!({ "domain": d.0, "pcr": pcr }));
        }
        let names: Vec<String> = loads.iter().map(|(_, n, _)| n.clone()).collect();
        r.metric("order", json!(names));
        r.metric("pcrs", Value::Object(pcrs));
        r.metric("boot_ticks", json!(m.now()));
        Ok(())
    })
}

// ------------------------------------------------------- secure channel

/// Authenticated channel to a remote verifier set up by [`handshake`].
struct Channel {
    key: [u8; 32],
    sent: u64,
}

fn handshake(p: &mut Program, m: &mut Machine, s: &mut Session, image: &str) -> Result<(Channel, Vec<u8>), String> {
    tee("hello", p.rt.net_send(m, s, &[pkt::HELLO]))?;
    let c = tee("challenge", p.rt.net_recv(m, s, NET_WAIT))?;
    if c.first() != Some(&pkt::CHALLENGE) || c.len() != 1 + NONCE_LEN {
        return Err("malformed challenge".into());
    }
    let nonce: Nonce = c[1..].try_into().expect("length checked");
    let q = tee("attest", p.rt.attest(m, nonce))?;
    let mut a = vec![pkt::ATTEST];
    a.extend(q.encode());
    tee("attest send", p.rt.net_send(m, s, &a))?;
    let reply = tee("verdict", p.rt.net_recv(m, s, NET_WAIT))?;
    match reply.split_first() {
        Some((&pkt::ACCEPT, sealed)) => {
            let key = session_key(&app_secret(image), &nonce);
            let greeting = ae_open(&key, sealed).map_err(|e| format!("greeting: {e}"))?;
            Ok((Channel { key, sent: 0 }, greeting))
        }
        Some((&pkt::REJECT, reason)) => Err(format!("verifier rejected attestation ({reason:?})")),
        _ => Err("malformed verdict".into()),
    }
}

fn exchange(p: &mut Program, m: &mut Machine, s: &mut Session, ch: &mut Channel, msg: &[u8]) -> Result<Vec<u8>, String> {
    ch.sent += 1;
    let mut out = vec![pkt::SEALED];
    out.extend(ae_seal(&ch.key, &ae_nonce(0, ch.sent), msg));
    tee("send", p.rt.net_send(m, s, &out))?;
    let reply = tee("receive", p.rt.net_recv(m, s, NET_WAIT))?;
    match reply.split_first() {
        Some((&pkt::SEALED, body)) => ae_open(&ch.key, body).map_err(|e| format!("reply: {e}")),
        _ => Err("unexpected packet".into()),
    }
}

/// The manager, with resets switched off, hands a device the untrusted
/// workload just used to the program.
fn stale_via_skipped_reset(r: &mut Recorder, m: &mut Machine, p: &mut Program, opts: &RunOptions) -> Result<(), String> {
    let was = m.hw().faults.rm_skip_reset;
    m.hw_mut().faults.rm_skip_reset = true;
    let b = launch(
        m,
        vec![
            ("setup", "untrusted opens serial-out", Action::Open { resource: "serial-out".into(), duration: 200 }),
            ("setup", "untrusted prints", Action::Print { text: "untrusted was here".into() }),
            ("setup", "untrusted closes serial-out", Action::Close { resource: "serial-out".into() }),
        ],
    );
    settle(m, 2 * SETTLE + 400);
    drop(b);
    let got = p.open(m, resource::SERIAL_OUT, MsgLimit::Finite(8), 200);
    m.hw_mut().faults.rm_skip_reset = was;
    let detail = match &got {
        Ok(_) => "session verified".to_string(),
        Err(e) => e.to_string(),
    };
    let blocked = matches!(got, Err(TeeError::StaleDomain));
    if let Ok(mut s) = got {
        let _ = p.rt.end_session(m, &mut s);
    }
    r.direct_attack(m, "stale-reuse", "manager hands over serial-out without a reset", blocked, detail);
    budget(m, opts)
}

fn rm_reset_attempt(r: &mut Recorder, m: &mut Machine, target: DomainId, what: &str) {
    let res = m.request_reset(DomainId::RESOURCE_MANAGER, target);
    let blocked = matches!(res, Err(ResetError::Blocked(_)));
    let detail = match res {
        Ok(()) => "reset performed".to_string(),
        Err(e) => e.to_string(),
    };
    r.direct_attack(m, "reset-attempt", what, blocked, detail);
}

// ------------------------------------------------------------- banking

pub fn run_banking(spec: &ScenarioSpec, opts: &RunOptions) -> ScenarioRun {
    let mut run = single_machine(spec, opts, |r, m| banking(r, m, spec, opts));
    run.result.tcb = Some(tcb_report(&run.trace, &run.manifest));
    run
}

fn banking(r: &mut Recorder, m: &mut Machine, spec: &ScenarioSpec, opts: &RunOptions) -> Result<(), String> {
    boot(r, m, opts)?;
    let me = TEE1;
    let manifest = m.hw().manifest().clone();
    let image = manifest.domain(me).ok_or("no TEE1")?.image.clone();
    let genuine = manifest.image(&image).ok_or("no bank image")?.digest();
    let expected = if spec.expect_attest_reject {
        boot_pcr(&crypto::hash_parts(&[b"tampered:", image.as_bytes()]))
    } else {
        boot_pcr(&genuine)
    };
    let pcr = manifest.domain(me).map(|d| d.pcr_index).unwrap_or_default();
    let verifier = Verifier::new(manifest.device_key, pcr, expected, app_secret(&image), opts.seed);
    let bank = Bank {
        verifier,
        credential: spec.credential.clone(),
        balance_cents: 100_000,
        logged_in: false,
        transfers: Vec::new(),
    };
    m.set_responder(Responder::Bank(Box::new(bank)));
    let (so_dom, so) = device_ports(m, DeviceKind::SerialOut).ok_or("no serial-out")?;
    let (_, si) = device_ports(m, DeviceKind::SerialIn).ok_or("no serial-in")?;
    let (_, net) = device_ports(m, DeviceKind::Network).ok_or("no network")?;
    let untrusted = m.hw().untrusted();
    let mut p = Program::new(me, opts.seed);

    // Exclusive UI: show the secret, read the credential.
    let ui_start = m.now();
    let mut out = tee("serial-out", p.open(m, resource::SERIAL_OUT, MsgLimit::Finite(32), 600))?;
    let mut inp = tee("serial-in", p.open(m, resource::SERIAL_IN, MsgLimit::Finite(8), 600))?;
    let batch = launch(
        m,
        vec![
            ("ui-hijack", "untrusted prints a fake prompt", Action::WriteMailbox {
                mailbox: so.ctrl_in.0,
                opcode: op::PRINT,
                text: "password: ".into(),
            }),
            ("unauthorized-write", "untrusted asks serial-in for a line", Action::WriteMailbox {
                mailbox: si.ctrl_in.0,
                opcode: op::READ_LINE,
                text: String::new(),
            }),
            ("unauthorized-read", "untrusted reads the serial-in reply", Action::ReadMailbox { mailbox: si.reply.0 }),
            ("unauthorized-read", "untrusted reads program memory", Action::Peek { domain: me.0, offset: 0 }),
            ("status-snoop", "untrusted reads serial-out status", Action::Snoop { mailbox: so.ctrl_in.0 }),
            ("reset-attempt", "untrusted resets serial-out", Action::Reset { domain: so_dom.0 }),
        ],
    );
    tee("print", p.rt.print(m, &mut out, &format!("secret: {}", spec.secret)))?;
    m.push_input(&spec.credential);
    let line = tee("readline", p.rt.readline(m, &mut inp))?;
    r.check(Some(m), "credential read from the terminal", line == spec.credential, line.clone());
    rm_reset_attempt(r, m, so_dom, "manager resets serial-out mid-session");
    settle(m, SETTLE);
    collect(r, m, batch);
    tee("end serial-out", p.rt.end_session(m, &mut out))?;
    tee("end serial-in", p.rt.end_session(m, &mut inp))?;
    let again = p.rt.print(m, &mut out, "secret again");
    r.direct_attack(
        m,
        "stale-reuse",
        "program output through its closed UI session",
        again == Err(TeeError::Ended),
        format!("{again:?}"),
    );
    r.phase("ui", m.now() - ui_start);
    budget(m, opts)?;

    // Network: attest to the bank and log in.
    let net_start = m.now();
    let mut s = tee("network", p.open(m, resource::NETWORK, MsgLimit::Finite(64), 800))?;
    let window = manifest.arbiters.first().map(|a| a.dma_window.start).unwrap_or(manifest::UNTRUSTED_BASE);
    let batch = launch(
        m,
        vec![
            ("unauthorized-write", "untrusted DMA while the program owns the network", Action::Dma {
                dir: DmaDir::ToDevice,
                addr: window,
                len: 16,
            }),
            ("status-snoop", "untrusted reads network status", Action::Snoop { mailbox: net.ctrl_in.0 }),
            ("unauthorized-read", "untrusted reads the network reply", Action::ReadMailbox { mailbox: net.reply.0 }),
        ],
    );
    match (handshake(&mut p, m, &mut s, &image), spec.expect_attest_reject) {
        (Ok((mut ch, greeting)), false) => {
            r.check(Some(m), "bank accepts attestation", greeting == b"bank ready", String::from_utf8_lossy(&greeting));
            let login = exchange(&mut p, m, &mut s, &mut ch, format!("login {}", spec.credential).as_bytes())?;
            let login = String::from_utf8_lossy(&login).into_owned();
            r.check(Some(m), "login accepted", login.starts_with("welcome"), login);
            let tx = exchange(&mut p, m, &mut s, &mut ch, format!("transfer {}", spec.transfer).as_bytes())?;
            let tx = String::from_utf8_lossy(&tx).into_owned();
            r.check(Some(m), "transfer accepted", tx.starts_with("transfer ok"), tx);
        }
        (Err(e), true) => {
            r.check(Some(m), "bank rejects a program it does not expect", e.contains("rejected"), e);
        }
        (Ok(_), true) => {
            r.check(Some(m), "bank rejects a program it does not expect", false, "accepted");
        }
        (Err(e), false) => return Err(e),
    }
    settle(m, SETTLE);
    collect(r, m, batch);
    tee("end network", p.rt.end_session(m, &mut s))?;
    r.phase("network", m.now() - net_start);
    budget(m, opts)?;

    stale_via_skipped_reset(r, m, &mut p, opts)?;
    settle(m, SETTLE);

    let shown = m.terminal().iter().filter(|l| l.contains(&spec.secret)).count();
    r.check(Some(m), "secret shown exactly once", shown == 1, format!("{shown} times"));
    let leaked = m.trace().iter().any(|e| e.domain == Some(untrusted) && e.detail.contains(&spec.credential));
    r.check(Some(m), "credential never reaches the untrusted domain", !leaked, "");
    if let Some(Responder::Bank(b)) = m.link().map(|l| &l.responder) {
        let expected_tx = usize::from(!spec.expect_attest_reject);
        r.check(Some(m), "bank saw the expected transfers", b.transfers.len() == expected_tx, format!("{:?}", b.transfers));
        r.metric("balance_cents", json!(b.balance_cents));
    }
    r.phase("verify", p.verify_ticks);
    r.metric("quota_updates", json!(p.rt.updates.len()));
    Ok(())
}

// ------------------------------------------------------------- insulin

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reading {
    pub period: u32,
    pub glucose: u16,
    pub dose: u16,
}

const HISTORY_MAGIC: &[u8; 4] = b"HIST";

pub fn encode_history(h: &[Reading]) -> Vec<u8> {
    let mut out = HISTORY_MAGIC.to_vec();
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    for r in h {
        out.extend_from_slice(&r.period.to_le_bytes());
        out.extend_from_slice(&r.glucose.to_le_bytes());
        out.extend_from_slice(&r.dose.to_le_bytes());
    }
    out
}

/// Empty for a blank partition; `None` for anything else malformed.
pub fn decode_history(bytes: &[u8]) -> Option<Vec<Reading>> {
    if bytes.len() < 8 || bytes[..4] != HISTORY_MAGIC[..] {
        return bytes.iter().all(|&b| b == 0).then(Vec::new);
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().ok()?) as usize;
    let body = bytes.get(8..8 + n * 8)?;
    Some(
        body.chunks_exact(8)
            .map(|c| Reading {
                period: u32::from_le_bytes(c[0..4].try_into().expect("8-byte chunk")),
                glucose: u16::from_le_bytes([c[4], c[5]]),
                dose: u16::from_le_bytes([c[6], c[7]]),
            })
            .collect(),
    )
}

pub fn run_insulin(spec: &ScenarioSpec, opts: &RunOptions) -> ScenarioRun {
    let mut run = single_machine(spec, opts, |r, m| insulin(r, m, spec, opts));
    run.result.tcb = Some(tcb_report(&run.trace, &run.manifest));
    run
}

fn load_history(p: &mut Program, m: &mut Machine) -> Result<Vec<Reading>, String> {
    let mut st = tee("storage", p.open(m, resource::STORAGE, MsgLimit::Finite(32), 400))?;
    let bytes = tee("storage read", p.rt.storage_read(m, &mut st, 0, 1))?;
    tee("end storage", p.rt.end_session(m, &mut st))?;
    decode_history(&bytes).ok_or_else(|| "history block is corrupt".to_string())
}

fn insulin(r: &mut Recorder, m: &mut Machine, spec: &ScenarioSpec, opts: &RunOptions) -> Result<(), String> {
    boot(r, m, opts)?;
    let me = TEE2;
    let manifest = m.hw().manifest().clone();
    let image = manifest.domain(me).ok_or("no TEE2")?.image.clone();
    let digest = manifest.image(&image).ok_or("no pump image")?.digest();
    let pcr = manifest.domain(me).map(|d| d.pcr_index).unwrap_or_default();
    let server = HealthServer {
        verifier: Verifier::new(manifest.device_key, pcr, boot_pcr(&digest), app_secret(&image), opts.seed),
        provider_key: provider_key(),
        epoch: 0,
        reports: Vec::new(),
    };
    m.set_responder(Responder::Health(Box::new(server)));
    m.push_glucose(&spec.glucose);
    let (pump_dom, pump) = device_ports(m, DeviceKind::InsulinPump).ok_or("no pump domain")?;
    let mut p = Program::new(me, opts.seed);
    let mut history: Vec<Reading> = Vec::new();
    let start = m.now();
    let mut idle = 0;
    let mut launched = Vec::new();

    for period in 0..spec.periods {
        let due = start + Tick::from(period) * spec.interval;
        r.check(Some(m), format!("period {period} starts on time"), m.now() <= due, format!("now {} due {due}", m.now()));
        while m.now() < due {
            m.step();
            idle += 1;
        }
        launched.push(m.now());

        let stored = load_history(&mut p, m)?;
        r.check(Some(m), format!("period {period}: history intact"), stored == history, format!("{} readings", stored.len()));

        let mut sensor = tee("sensor", p.open(m, resource::GLUCOSE_SENSOR, MsgLimit::Finite(8), 200))?;
        let g = tee("sensor read", p.rt.call(m, &mut sensor, Frame::empty(op::SENSOR_READ)))?;
        tee("end sensor", p.rt.end_session(m, &mut sensor))?;
        let glucose = match g.payload[..] {
            [a, b] => u16::from_le_bytes([a, b]),
            _ => return Err("malformed glucose reading".into()),
        };
        let dose = dose_for(glucose);

        let mut net = tee("network", p.open(m, resource::NETWORK, MsgLimit::Finite(64), 800))?;
        let (mut ch, _) = handshake(&mut p, m, &mut net, &image)?;
        let mut report = period.to_le_bytes().to_vec();
        report.extend_from_slice(&glucose.to_le_bytes());
        report.extend_from_slice(&dose.to_le_bytes());
        let token = exchange(&mut p, m, &mut net, &mut ch, &report)?;
        tee("end network", p.rt.end_session(m, &mut net))?;
        if token.len() != 32 {
            return Err(format!("provider token has {} bytes", token.len()));
        }

        let mut ps = tee("pump", p.open(m, resource::INSULIN_PUMP, MsgLimit::Finite(8), 300))?;
        let attacked = period == spec.attack_period;
        let batch = attacked.then(|| {
            launch(
                m,
                vec![
                    ("pump-hijack", "untrusted doses through the pump mailbox", Action::WriteMailbox {
                        mailbox: pump.ctrl_in.0,
                        opcode: op::PUMP_DOSE,
                        text: "\u{9}\u{0}".into(),
                    }),
                    ("unauthorized-read", "untrusted reads the pump reply", Action::ReadMailbox { mailbox: pump.reply.0 }),
                    ("status-snoop", "untrusted reads pump status", Action::Snoop { mailbox: pump.ctrl_in.0 }),
                    ("reset-attempt", "untrusted resets the pump", Action::Reset { domain: pump_dom.0 }),
                ],
            )
        });
        tee("unlock", p.rt.call(m, &mut ps, Frame::new(op::PUMP_UNLOCK, token)))?;
        if attacked {
            rm_reset_attempt(r, m, pump_dom, "manager resets the pump while dosing");
        }
        tee("dose", p.rt.call(m, &mut ps, Frame::new(op::PUMP_DOSE, dose.to_le_bytes().to_vec())))?;
        if let Some(b) = batch {
            settle(m, SETTLE);
            collect(r, m, b);
        }
        tee("end pump", p.rt.end_session(m, &mut ps))?;
        if attacked {
            let again = p.rt.call(m, &mut ps, Frame::new(op::PUMP_DOSE, 1u16.to_le_bytes().to_vec()));
            r.direct_attack(
                m,
                "stale-reuse",
                "program doses through its closed pump session",
                again == Err(TeeError::Ended),
                format!("{again:?}"),
            );
            pump_without_token(r, m, pump)?;
            partition_probe(r, m)?;
        }

        history.push(Reading { period, glucose, dose });
        let mut st = tee("storage", p.open(m, resource::STORAGE, MsgLimit::Finite(32), 400))?;
        tee("storage write", p.rt.storage_write(m, &mut st, 0, &encode_history(&history)))?;
        tee("end storage", p.rt.end_session(m, &mut st))?;
        budget(m, opts)?;
    }

    let stored = load_history(&mut p, m)?;
    r.check(
        Some(m),
        "history persists across sessions",
        stored == history && stored.len() == spec.periods as usize,
        format!("{} readings", stored.len()),
    );
    let doses: Vec<u16> = history.iter().map(|h| h.dose).collect();
    let delivered = m.pump().map(|p| p.doses.clone()).unwrap_or_default();
    r.check(Some(m), "pump delivered exactly the computed doses", delivered == doses, format!("{delivered:?}"));
    if let Some(Responder::Health(h)) = m.link().map(|l| &l.responder) {
        r.check(Some(m), "provider received every report", h.reports.len() == spec.periods as usize, format!("{}", h.reports.len()));
    }
    let gaps: Vec<Tick> = launched.windows(2).map(|w| w[1] - w[0]).collect();
    r.check(
        Some(m),
        "periods run at fixed intervals",
        gaps.iter().all(|&g| g == spec.interval),
        format!("{gaps:?}"),
    );
    r.metric("history", json!(history));
    r.metric("period_starts", json!(launched));
    r.phase("verify", p.verify_ticks);
    r.phase("idle", idle);
    r.phase("io", (m.now() - start).saturating_sub(idle + p.verify_ticks));
    Ok(())
}

/// The untrusted workload obtains the pump legitimately and doses without
/// a provider token.
fn pump_without_token(r: &mut Recorder, m: &mut Machine, pump: Ports) -> Result<(), String> {
    let u = m.hw().untrusted();
    let before = m.pump().map(|p| p.doses.len()).unwrap_or_default();
    let b = launch(m, vec![("setup", "untrusted opens the pump", Action::Open { resource: "pump".into(), duration: 200 })]);
    settle(m, SETTLE);
    let granted = untrusted_os(m).is_some_and(|os| os.holds(resource::INSULIN_PUMP));
    drop(b);
    let detail = if granted {
        let sent = m.with_ctx(u, |c| c.send(pump.ctrl_in, &Frame::new(op::PUMP_DOSE, 9u16.to_le_bytes().to_vec())));
        let mut reply = None;
        for _ in 0..20 {
            m.step();
            if let Ok(Ok(f)) = m.with_ctx(u, |c| c.recv(pump.reply)) {
                reply = Some(f);
                break;
            }
        }
        launch(m, vec![("setup", "untrusted closes the pump", Action::Close { resource: "pump".into() })]);
        settle(m, SETTLE);
        match (sent, reply) {
            (Err(e), _) => e.to_string(),
            (Ok(_), Some(f)) => f.error_code().map_or("accepted".to_string(), |c| c.name().to_string()),
            (Ok(_), None) => "no reply".to_string(),
        }
    } else {
        "pump not granted".to_string()
    };
    let after = m.pump().map(|p| p.doses.len()).unwrap_or_default();
    let blocked = after == before && (detail == ErrCode::PumpLocked.name() || !granted);
    r.direct_attack(m, "pump-hijack", "untrusted doses without a provider token", blocked, detail);
    Ok(())
}

/// The untrusted workload authenticates to the program's partition.
fn partition_probe(r: &mut Recorder, m: &mut Machine) -> Result<(), String> {
    let b = launch(
        m,
        vec![("unauthorized-read", "untrusted opens the insulin partition", Action::Auth {
            partition: manifest::INSULIN_PARTITION,
        })],
    );
    settle(m, SETTLE);
    collect(r, m, b);
    Ok(())
}

// ---------------------------------------------------------- contention

/// Ticks the untrusted domain spent queued for `res` while `tee` held it:
/// the overlap of each untrusted wait (queued until granted) with each
/// session of `tee` (granted until expiry or yield).
pub fn blocked_gap(trace: &[TraceEvent], manifest: &MachineManifest, untrusted: DomainId, tee: DomainId, res: u8) -> Tick {
    let Some(r) = lookup_resource(manifest, tee, res) else { return 0 };
    let Some(&first_mb) = r.mailboxes.first() else { return 0 };
    let tag = |who: DomainId| format!("{who} resource {res:#04x}");
    let tee_tag = tag(tee);
    let u_tag = tag(untrusted);
    let mut sessions: Vec<(Tick, Tick)> = Vec::new();
    let mut waits: Vec<(Tick, Tick)> = Vec::new();
    let mut open_session: Option<Tick> = None;
    let mut open_wait: Option<Tick> = None;
    for e in trace {
        match e.event {
            EventKind::Granted if e.detail.starts_with(&tee_tag) => open_session = Some(e.tick),
            EventKind::Granted if e.detail.starts_with(&u_tag) => {
                if let Some(q) = open_wait.take() {
                    waits.push((q, e.tick));
                }
            }
            EventKind::RequestQueued if e.detail.starts_with(&u_tag) => open_wait = Some(e.tick),
            EventKind::SessionExpired | EventKind::Yielded if e.mailbox == Some(first_mb) => {
                if let Some(s) = open_session.take() {
                    sessions.push((s, e.tick));
                }
            }
            _ => {}
        }
    }
    let last = trace.last().map_or(0, |e| e.tick + 1);
    if let Some(q) = open_wait {
        waits.push((q, last));
    }
    if let Some(s) = open_session {
        sessions.push((s, last));
    }
    let mut gap = 0;
    for &(ws, we) in &waits {
        for &(ss, se) in &sessions {
            let lo = ws.max(ss);
            let hi = we.min(se);
            gap += hi.saturating_sub(lo);
        }
    }
    gap
}

pub fn run_contention(spec: &ScenarioSpec, opts: &RunOptions) -> ScenarioRun {
    let mut r = Recorder::new(&spec.name);
    let mut manifest = MachineManifest::default_machine();
    let mut gaps = Vec::new();
    for &k in &spec.session_ticks {
        let mut s = spec.clone();
        if s.workload.0.is_empty() {
            s.workload = Script(vec![Action::Stream { block: 0, count: 1, times: u32::MAX }]);
        }
        let mut m = match build_machine(&s, opts) {
            Ok(m) => m,
            Err(e) => {
                r.check(None, "machine builds", false, e);
                break;
            }
        };
        manifest = m.hw().manifest().clone();
        match contention_once(&mut r, &mut m, k, opts) {
            Ok(gap) => gaps.push(json!({ "k": k, "gap": gap })),
            Err(e) => {
                r.check(Some(&m), format!("K={k}: run completes"), false, e);
            }
        }
        r.absorb(m);
    }
    r.metric("gaps", json!(gaps));
    r.finish(manifest)
}

fn contention_once(r: &mut Recorder, m: &mut Machine, k: u32, opts: &RunOptions) -> Result<Tick, String> {
    boot(r, m, opts)?;
    m.run(40);
    let u = m.hw().untrusted();
    let reads_before = untrusted_os(m).map_or(0, |os| os.reads_done);
    if k > 0 {
        let mut p = Program::new(TEE1, opts.seed);
        let mut s = tee("storage", p.open(m, resource::STORAGE, MsgLimit::Infinite, k))?;
        tee("storage write", p.rt.storage_write(m, &mut s, 0, b"contention"))?;
        while m.now() < s.deadline {
            m.step();
        }
        tee("end storage", p.rt.end_session(m, &mut s))?;
    }
    m.run(60);
    let reads = untrusted_os(m).map_or(0, |os| os.reads_done) - reads_before;
    let gap = blocked_gap(m.trace(), m.hw().manifest(), u, TEE1, resource::STORAGE);
    r.check(Some(m), format!("K={k}: gap {gap} within one tick"), gap.abs_diff(Tick::from(k)) <= 1, format!("{reads} reads"));
    r.check(Some(m), format!("K={k}: untrusted reader makes progress"), reads > 0, "");
    budget(m, opts)?;
    Ok(gap)
}

// ----------------------------------------------------------- freshness

/// Deterministic frame for injection trial `i`.
pub fn injected_frame(seed: u64, i: u32) -> (u8, Vec<u8>) {
    let h = crypto::hash_parts(&[b"inject", &seed.to_le_bytes(), &i.to_le_bytes()]);
    let res = [resource::SERIAL_OUT, resource::SERIAL_IN, resource::NETWORK][h.0[0] as usize % 3];
    let len = 1 + h.0[1] as usize % (manifest::CONTROL_MSG - 1);
    let mut bytes = Vec::with_capacity(len);
    let mut block = h;
    while bytes.len() < len {
        block = crypto::hash(block.as_bytes());
        bytes.extend_from_slice(&block.0);
    }
    bytes.truncate(len);
    (res, bytes)
}

pub fn run_freshness(spec: &ScenarioSpec, opts: &RunOptions) -> ScenarioRun {
    let mut r = Recorder::new(&spec.name);
    let mut manifest = MachineManifest::default_machine();
    let mut stale = 0u32;
    let mut false_positive = 0u32;
    for inject in [true, false] {
        for i in 0..spec.trials {
            let (res, frame) = injected_frame(opts.seed, i);
            let mut m = match build_machine(spec, opts) {
                Ok(m) => m,
                Err(e) => {
                    r.check(None, "machine builds", false, e);
                    return r.finish(manifest);
                }
            };
            manifest = m.hw().manifest().clone();
            if m.boot(opts.max_ticks).is_err() {
                r.check(Some(&m), format!("trial {i}: boot"), false, "");
                r.absorb(m);
                continue;
            }
            if inject {
                m.hw_mut().faults.rm_preinject = Some(frame);
            }
            let mut p = Program::new(TEE1, opts.seed ^ u64::from(i));
            let got = p.open(&mut m, res, MsgLimit::Finite(8), 200);
            match (inject, &got) {
                (true, Err(TeeError::StaleDomain)) => stale += 1,
                (false, Err(_)) => false_positive += 1,
                _ => {}
            }
            if let Ok(mut s) = got {
                let _ = p.rt.end_session(&mut m, &mut s);
            }
            r.absorb(m);
        }
    }
    let n = spec.trials;
    r.check(None, "every injection detected as stale", stale == n, format!("{stale}/{n}"));
    r.check(None, "no false positives without injection", false_positive == 0, format!("{false_positive}/{n}"));
    r.metric("stale", json!(stale));
    r.metric("false_positives", json!(false_positive));
    r.finish(manifest)
}

/// Scenario by built-in name or path to a JSON scenario file.
pub fn load(name_or_path: &str) -> Result<ScenarioSpec, String> {
    if let Some(s) = ScenarioSpec::builtin(name_or_path) {
        return Ok(s);
    }
    let path = std::path::Path::new(name_or_path);
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{name_or_path}: {e}"))?;
        return serde_json::from_str(&text).map_err(|e| format!("{name_or_path}: {e}"));
    }
    Err(format!("unknown scenario {name_or_path:?}; built-in: {}", BUILTIN.join(", ")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::BLOCK_SIZE;

    #[test]
    fn dose_policy_is_clamped_linear() {
        assert_eq!(dose_for(80), 0);
        assert_eq!(dose_for(120), 0);
        assert_eq!(dose_for(129), 0);
        assert_eq!(dose_for(180), 6);
        assert_eq!(dose_for(400), 10);
        assert_eq!(dose_for(u16::MAX), MAX_DOSE);
    }

    #[test]
    fn history_round_trip_and_blank_partition() {
        let h = vec![Reading { period: 0, glucose: 180, dose: 6 }, Reading { period: 1, glucose: 95, dose: 0 }];
        let mut block = encode_history(&h);
        block.resize(BLOCK_SIZE, 0);
        assert_eq!(decode_history(&block).unwrap(), h);
        assert_eq!(decode_history(&[0u8; BLOCK_SIZE]).unwrap(), vec![]);
        assert!(decode_history(&[1u8; 16]).is_none());
    }

    #[test]
    fn builtins_parse_back_from_json() {
        for name in BUILTIN {
            let s = ScenarioSpec::builtin(name).unwrap();
            let text = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<ScenarioSpec>(&text).unwrap(), s);
        }
    }

    #[test]
    fn unknown_scenario_is_an_error() {
        assert!(load("unknown").is_err());
    }

    #[test]
    fn injected_frames_fit_a_control_slot() {
        for i in 0..200 {
            let (res, f) = injected_frame(3, i);
            assert!(!f.is_empty() && f.len() < manifest::CONTROL_MSG);
            assert!([resource::SERIAL_OUT, resource::SERIAL_IN, resource::NETWORK].contains(&res));
        }
    }

    #[test]
    fn gap_is_overlap_of_wait_and_session() {
        let ev = |tick, event, detail: &str, mailbox: Option<u16>| TraceEvent {
            tick,
            event,
            domain: Some(DomainId(0)),
            mailbox: mailbox.map(crate::mailbox::MailboxId),
            detail: detail.into(),
        };
        let trace = vec![
            ev(10, EventKind::Granted, "1 resource 0x03 mailboxes", None),
            ev(12, EventKind::RequestQueued, "7 resource 0x03", None),
            ev(60, EventKind::SessionExpired, "time", Some(4)),
            ev(63, EventKind::Granted, "7 resource 0x03 mailboxes", None),
        ];
        let m = MachineManifest::default_machine();
        assert_eq!(blocked_gap(&trace, &m, DomainId(7), DomainId(1), resource::STORAGE), 48);
        assert_eq!(blocked_gap(&[], &m, DomainId(7), DomainId(1), resource::STORAGE), 0);
    }
}
