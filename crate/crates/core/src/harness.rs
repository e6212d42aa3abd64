//! Bounded exhaustive exploration of one mailbox together with the reset
//! guard and the arbiter that read its state.
//!
//! Breadth-first search runs over every interleaving of domain actions up
//! to a horizon. Each step drives the production [`MailboxState`] and an
//! abstract model written separately in this file; properties are judged
//! on the production behaviour, and any disagreement with the model is
//! reported as well. States are deduplicated by the SHA-256 digest of a
//! canonical encoding. This is a bounded check, not a proof: it says
//! nothing about queues deeper, quotas larger or runs longer than the
//! bounds.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto;
use crate::mailbox::{
    DomainId, FixedRole, MailboxConfig, MailboxError, MailboxId, MailboxState, MailboxStatus, MsgLimit, Mutant, Quota,
    Tick,
};
use crate::platform::{reset_guard, route_for, Route};

const RM: DomainId = DomainId::RESOURCE_MANAGER;
/// The fixed end of the explored mailbox.
const FIXED: DomainId = DomainId(1);
/// Payload bytes written by the explored domains. Nonzero, so a missed
/// wipe shows up in the slot bytes.
const PAYLOADS: [u8; 2] = [0xA1, 0xB2];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    /// RM, the fixed end and at least one delegate. The highest id plays
    /// the untrusted domain for the arbiter.
    pub n_domains: u8,
    pub depth: usize,
    pub msg_quotas: Vec<MsgLimit>,
    pub time_quotas: Vec<u32>,
    /// Maximum number of actions along any explored path.
    pub horizon: usize,
    /// Ceiling on the estimated and the actual number of states.
    pub max_states: usize,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            n_domains: 4,
            depth: 2,
            msg_quotas: vec![MsgLimit::Finite(1), MsgLimit::Finite(2), MsgLimit::Infinite],
            time_quotas: vec![1, 2, 3, 4],
            horizon: 8,
            max_states: 4_000_000,
        }
    }
}

impl Bounds {
    pub fn small() -> Self {
        Bounds {
            n_domains: 3,
            depth: 1,
            msg_quotas: vec![MsgLimit::Finite(1), MsgLimit::Infinite],
            time_quotas: vec![1, 2],
            horizon: 5,
            ..Bounds::default()
        }
    }

    pub fn preset(name: &str) -> Option<Bounds> {
        match name {
            "small" => Some(Bounds::small()),
            "default" => Some(Bounds::default()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |why: &str| Err(HarnessError::InvalidBounds(why.into()));
        if self.n_domains < 3 {
            return bad("need at least the manager, a fixed end and one delegate");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.msg_quotas.is_empty() || self.time_quotas.is_empty() {
            return bad("quota value sets must be nonempty");
        }
        if self.msg_quotas.contains(&MsgLimit::Finite(0)) || self.time_quotas.contains(&0) {
            return bad("quota values must be positive");
        }
        let est = self.estimated_states();
        if est > self.max_states as f64 {
            return Err(HarnessError::BoundsTooLarge { estimate: est as u64, ceiling: self.max_states });
        }
        Ok(())
    }

    /// Upper bound on reachable states across both fixed-end roles.
    pub fn estimated_states(&self) -> f64 {
        let delegates = f64::from(self.n_domains - 2);
        let max_msgs = self
            .msg_quotas
            .iter()
            .map(|m| match m {
                MsgLimit::Finite(n) => f64::from(*n) + 1.0,
                MsgLimit::Infinite => 1.0,
            })
            .sum::<f64>();
        let max_time = self.time_quotas.iter().copied().max().unwrap_or(1) as f64;
        let sessions = 1.0 + delegates * max_msgs * max_time * (self.horizon as f64 + 1.0);
        let queues: f64 = (0..=self.depth).map(|k| (PAYLOADS.len() as f64).powi(k as i32)).sum();
        2.0 * (self.horizon as f64 + 1.0) * sessions * queues * self.depth as f64
    }

    fn delegates(&self) -> impl Iterator<Item = DomainId> {
        (2..self.n_domains).map(DomainId)
    }

    fn untrusted(&self) -> DomainId {
        DomainId(self.n_domains - 1)
    }

    fn domains(&self) -> impl Iterator<Item = DomainId> {
        (0..self.n_domains).map(DomainId)
    }

    fn config(&self, role: FixedRole) -> MailboxConfig {
        let mut wired: BTreeSet<DomainId> = self.delegates().collect();
        wired.insert(RM);
        MailboxConfig {
            id: MailboxId(0),
            name: "explored".into(),
            fixed_end: FIXED,
            fixed_role: role,
            wired_delegates: wired,
            depth: self.depth,
            msg_size: 1,
        }
    }

    /// Actions tried in every state, in a fixed order.
    pub fn actions(&self) -> Vec<Action> {
        let mut out = Vec::new();
        for target in self.delegates() {
            for &msgs in &self.msg_quotas {
                for &ticks in &self.time_quotas {
                    out.push(Action::Delegate { caller: RM, target, msgs, ticks });
                }
            }
        }
        let probe = Action::Delegate { caller: RM, target: FIXED, msgs: self.msg_quotas[0], ticks: self.time_quotas[0] };
        out.push(probe.clone());
        out.push(Action::Delegate { caller: RM, target: RM, msgs: self.msg_quotas[0], ticks: self.time_quotas[0] });
        for caller in self.domains().filter(|d| !d.is_rm()) {
            for target in self.delegates().filter(|&t| t != caller) {
                out.push(Action::Delegate { caller, target, msgs: self.msg_quotas[0], ticks: self.time_quotas[0] });
            }
        }
        for caller in self.domains() {
            out.push(Action::Yield { caller });
        }
        for caller in self.domains() {
            for byte in PAYLOADS {
                out.push(Action::Write { caller, byte });
            }
        }
        for caller in self.domains() {
            out.push(Action::Read { caller });
        }
        for caller in self.domains() {
            out.push(Action::ReadStatus { caller });
        }
        out.push(Action::Tick);
        for caller in [RM, self.untrusted()] {
            for target in self.domains().filter(|d| !d.is_rm()) {
                out.push(Action::Reset { caller, target });
            }
        }
        out.push(Action::RouteQuery);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("bounds too large: about {estimate} states, ceiling {ceiling}")]
    BoundsTooLarge { estimate: u64, ceiling: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Delegate { caller: DomainId, target: DomainId, msgs: MsgLimit, ticks: u32 },
    Yield { caller: DomainId },
    Write { caller: DomainId, byte: u8 },
    Read { caller: DomainId },
    ReadStatus { caller: DomainId },
    Tick,
    Reset { caller: DomainId, target: DomainId },
    RouteQuery,
}

impl Action {
    fn caller(&self) -> Option<DomainId> {
        match *self {
            Action::Delegate { caller, .. }
            | Action::Yield { caller }
            | Action::Write { caller, .. }
            | Action::Read { caller }
            | Action::ReadStatus { caller }
            | Action::Reset { caller, .. } => Some(caller),
            Action::Tick | Action::RouteQuery => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Delegate { caller, target, msgs, ticks } => write!(f, "{caller} delegates to {target} ({msgs}, {ticks})"),
            Action::Yield { caller } => write!(f, "{caller} yields"),
            Action::Write { caller, byte } => write!(f, "{caller} writes {byte:#04x}"),
            Action::Read { caller } => write!(f, "{caller} reads"),
            Action::ReadStatus { caller } => write!(f, "{caller} reads status"),
            Action::Tick => f.write_str("tick"),
            Action::Reset { caller, target } => write!(f, "{caller} resets {target}"),
            Action::RouteQuery => f.write_str("arbiter route query"),
        }
    }
}

/// Checked properties: the thirteen mailbox invariants, the reset guard,
/// the arbiter, and agreement with the abstract model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropertyId {
    OutsiderImmutability,
    GuaranteedAccess,
    ReadWriteCorrect,
    OutsiderNoAccess,
    QuotaBound,
    TimeExpiry,
    OwnerStatus,
    FixedEndStatus,
    ResetDefault,
    DelegateOnlyByRm,
    TransitionsViaRm,
    DummyStatus,
    WipeOnTransition,
    ResetGuard,
    ArbiterExclusive,
    ModelConformance,
}

impl PropertyId {
    pub const ALL: [PropertyId; 16] = [
        PropertyId::OutsiderImmutability,
        PropertyId::GuaranteedAccess,
        PropertyId::ReadWriteCorrect,
        PropertyId::OutsiderNoAccess,
        PropertyId::QuotaBound,
        PropertyId::TimeExpiry,
        PropertyId::OwnerStatus,
        PropertyId::FixedEndStatus,
        PropertyId::ResetDefault,
        PropertyId::DelegateOnlyByRm,
        PropertyId::TransitionsViaRm,
        PropertyId::DummyStatus,
        PropertyId::WipeOnTransition,
        PropertyId::ResetGuard,
        PropertyId::ArbiterExclusive,
        PropertyId::ModelConformance,
    ];

    /// Mailbox invariant number, 1 to 13.
    pub fn invariant(self) -> Option<u8> {
        let i = PropertyId::ALL.iter().position(|&p| p == self)?;
        (i < 13).then_some(i as u8 + 1)
    }

    pub fn name(self) -> &'static str {
        match self {
            PropertyId::OutsiderImmutability => "outsider-immutability",
            PropertyId::GuaranteedAccess => "guaranteed-access",
            PropertyId::ReadWriteCorrect => "read-write-correct",
            PropertyId::OutsiderNoAccess => "outsider-no-access",
            PropertyId::QuotaBound => "quota-bound",
            PropertyId::TimeExpiry => "time-expiry",
            PropertyId::OwnerStatus => "owner-status",
            PropertyId::FixedEndStatus => "fixed-end-status",
            PropertyId::ResetDefault => "reset-default",
            PropertyId::DelegateOnlyByRm => "delegate-only-by-rm",
            PropertyId::TransitionsViaRm => "transitions-via-rm",
            PropertyId::DummyStatus => "dummy-status",
            PropertyId::WipeOnTransition => "wipe-on-transition",
            PropertyId::ResetGuard => "reset-guard",
            PropertyId::ArbiterExclusive => "arbiter-exclusive",
            PropertyId::ModelConformance => "model-conformance",
        }
    }
}

impl fmt::Display for PropertyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.invariant() {
            Some(n) => write!(f, "{} (invariant {n})", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

// ------------------------------------------------------------- model

/// Abstract mailbox, written from the rules rather than from the
/// production code.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Model {
    owner: DomainId,
    quota: Option<(MsgLimit, Tick)>,
    queue: VecDeque<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Expect {
    Ok,
    Read(u8),
    Err(MailboxError),
}

impl Model {
    fn new() -> Self {
        Model { owner: RM, quota: None, queue: VecDeque::new() }
    }

    fn release(&mut self) {
        *self = Model::new();
    }

    fn live(&self, now: Tick) -> bool {
        self.owner != RM && self.quota.is_some_and(|(_, d)| now < d)
    }

    fn writer(&self, cfg: &MailboxConfig) -> DomainId {
        if cfg.fixed_role == FixedRole::FixedReader { self.owner } else { cfg.fixed_end }
    }

    fn reader(&self, cfg: &MailboxConfig) -> DomainId {
        if cfg.fixed_role == FixedRole::FixedReader { cfg.fixed_end } else { self.owner }
    }

    fn count(&mut self, caller: DomainId, cfg: &MailboxConfig) {
        if caller != self.owner || caller == cfg.fixed_end {
            return;
        }
        if let Some((MsgLimit::Finite(n), d)) = self.quota {
            if n <= 1 {
                self.release();
            } else {
                self.quota = Some((MsgLimit::Finite(n - 1), d));
            }
        }
    }

    fn apply(&mut self, a: &Action, cfg: &MailboxConfig, now: Tick) -> Expect {
        match *a {
            Action::Delegate { caller, target, msgs, ticks } => {
                if caller != RM || self.owner != RM {
                    return Expect::Err(MailboxError::NotOwner);
                }
                if target == RM || !cfg.wired_delegates.contains(&target) {
                    return Expect::Err(MailboxError::NotWired);
                }
                *self = Model { owner: target, quota: Some((msgs, now + Tick::from(ticks))), queue: VecDeque::new() };
                Expect::Ok
            }
            Action::Yield { caller } => {
                if caller == RM || caller != self.owner {
                    return Expect::Err(MailboxError::NotOwner);
                }
                self.release();
                Expect::Ok
            }
            Action::Write { caller, byte } => {
                if caller != self.writer(cfg) {
                    return Expect::Err(MailboxError::NoAccess);
                }
                if self.queue.len() == cfg.depth {
                    return Expect::Err(MailboxError::QueueFull);
                }
                self.queue.push_back(byte);
                self.count(caller, cfg);
                Expect::Ok
            }
            Action::Read { caller } => {
                if caller != self.reader(cfg) {
                    return Expect::Err(MailboxError::NoAccess);
                }
                let Some(b) = self.queue.pop_front() else { return Expect::Err(MailboxError::QueueEmpty) };
                self.count(caller, cfg);
                Expect::Read(b)
            }
            Action::ReadStatus { .. } | Action::Reset { .. } | Action::RouteQuery => Expect::Ok,
            Action::Tick => {
                if self.quota.is_some_and(|(_, d)| now + 1 >= d) {
                    self.release();
                }
                Expect::Ok
            }
        }
    }

    fn status(&self, caller: DomainId, cfg: &MailboxConfig, now: Tick) -> MailboxStatus {
        if caller != self.owner && caller != cfg.fixed_end {
            return MailboxStatus { owner: None, msgs_left: MsgLimit::Finite(0), time_left: 0, is_dummy: true };
        }
        let (msgs_left, time_left) = match self.quota {
            None => (MsgLimit::Infinite, 0),
            Some((m, d)) => (m, d.saturating_sub(now)),
        };
        MailboxStatus { owner: Some(self.owner), msgs_left, time_left, is_dummy: false }
    }
}

// ------------------------------------------------------------ composite

/// Per-session bookkeeping derived from the production behaviour.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Ghost {
    /// Successful metered operations by the current owner.
    ops: u32,
    granted: Option<MsgLimit>,
}

#[derive(Clone, Debug)]
struct Composite {
    now: Tick,
    mb: MailboxState,
    model: Model,
    ghost: Ghost,
}

#[derive(Clone, Debug)]
struct Violation {
    property: PropertyId,
    detail: String,
}

/// Collects violations, formatting details only for properties not yet
/// reported.
struct Sink<'a> {
    known: &'a BTreeSet<PropertyId>,
    found: Vec<Violation>,
}

impl<'a> Sink<'a> {
    fn new(known: &'a BTreeSet<PropertyId>) -> Self {
        Sink { known, found: Vec::new() }
    }

    fn add<S: Into<String>>(&mut self, property: PropertyId, detail: impl FnOnce() -> S) {
        if !self.known.contains(&property) && self.found.iter().all(|x| x.property != property) {
            self.found.push(Violation { property, detail: detail().into() });
        }
    }
}

impl Composite {
    fn new(cfg: MailboxConfig, mutant: Option<Mutant>) -> Self {
        let mb = match mutant {
            Some(m) => MailboxState::new_mutant(cfg, m),
            None => MailboxState::new(cfg),
        }
        .expect("harness config is valid");
        Composite { now: 0, mb, model: Model::new(), ghost: Ghost::default() }
    }

    fn key(&self) -> [u8; 32] {
        let mut b = self.now.to_le_bytes().to_vec();
        b.extend(self.mb.canonical_bytes());
        b.push(self.model.owner.0);
        match self.model.quota {
            None => b.push(0),
            Some((m, d)) => {
                b.push(1);
                b.extend_from_slice(&m.to_wire().to_le_bytes());
                b.extend_from_slice(&d.to_le_bytes());
            }
        }
        b.push(self.model.queue.len() as u8);
        b.extend(self.model.queue.iter());
        b.extend_from_slice(&self.ghost.ops.to_le_bytes());
        b.extend_from_slice(&self.ghost.granted.map_or(0, |g| g.to_wire() as u64 + 1).to_le_bytes());
        crypto::hash(&b).0
    }

    fn summary(&self) -> StateSummary {
        StateSummary {
            now: self.now,
            owner: self.mb.owner(),
            quota: self.mb.quota(),
            queued: self.mb.queued(),
            slots_zero: self.mb.slot_bytes().iter().all(|&x| x == 0),
        }
    }

    fn route(&self, untrusted: DomainId) -> Route {
        route_for(&self.mb, untrusted, self.now)
    }

    /// Properties of a single state.
    fn check_state(&self, bounds: &Bounds, out: &mut Sink) {
        let cfg = self.mb.config().clone();
        if let Some(q) = self.mb.quota() {
            if self.mb.is_delegated() && self.now >= q.deadline {
                out.add(PropertyId::TimeExpiry, || format!("owner {} past deadline {}", self.mb.owner(), q.deadline));
            }
        }
        for d in bounds.domains() {
            let got = self.mb.read_status(d, self.now);
            let want = self.model.status(d, &cfg, self.now);
            if got == want {
                continue;
            }
            let p = if d == cfg.fixed_end {
                PropertyId::FixedEndStatus
            } else if d == self.model.owner {
                PropertyId::OwnerStatus
            } else {
                PropertyId::DummyStatus
            };
            out.add(p, || format!("status for {d}: {got:?}, expected {want:?}"));
        }
        let mut fresh = self.mb.clone();
        fresh.hw_reset();
        if fresh.owner() != RM || fresh.quota().is_some() || fresh.slot_bytes().iter().any(|&x| x != 0) || !fresh.is_empty() {
            out.add(PropertyId::ResetDefault, || "hardware reset leaves state behind");
        }
        let u = bounds.untrusted();
        let dma = self.route(u) == Route::Dma;
        let untrusted_session = self.model.live(self.now) && self.model.owner == u;
        if dma != untrusted_session {
            out.add(
                PropertyId::ArbiterExclusive, ||
                format!("route {:?} while owner {} live={}", self.route(u), self.model.owner, self.model.live(self.now)),
            );
        }
        let same = self.mb.owner() == self.model.owner
            && self.mb.quota().map(|q| (q.msgs, q.deadline)) == self.model.quota
            && self.mb.queued() == self.model.queue.iter().map(|&b| vec![b]).collect::<Vec<_>>();
        if !same {
            out.add(
                PropertyId::ModelConformance, ||
                format!(
                    "implementation owner {} quota {:?} queue {:?}; model owner {} quota {:?} queue {:?}",
                    self.mb.owner(),
                    self.mb.quota(),
                    self.mb.queued(),
                    self.model.owner,
                    self.model.quota,
                    self.model.queue
                ),
            );
        }
    }

    /// Applies `a` and returns the violations of the transition.
    fn step(&mut self, a: &Action, bounds: &Bounds, out: &mut Sink) {
        let cfg = self.mb.config().clone();
        let pre_owner = self.mb.owner();
        let pre_quota = self.mb.quota();
        let pre_slots = self.mb.slot_bytes().to_vec();
        let pre_model = self.model.clone();
        let now = self.now;
        let expect = self.model.apply(a, &cfg, now);

        let got: Expect = match *a {
            Action::Delegate { caller, target, msgs, ticks } => {
                let q = Quota { msgs, deadline: now + Tick::from(ticks) };
                match self.mb.delegate(caller, target, q, now) {
                    Ok(()) => Expect::Ok,
                    Err(e) => Expect::Err(e),
                }
            }
            Action::Yield { caller } => match self.mb.yield_access(caller, now) {
                Ok(()) => Expect::Ok,
                Err(e) => Expect::Err(e),
            },
            Action::Write { caller, byte } => match self.mb.write(caller, &[byte], now) {
                Ok(_) => Expect::Ok,
                Err(e) => Expect::Err(e),
            },
            Action::Read { caller } => match self.mb.read(caller, now) {
                Ok((m, _)) => Expect::Read(m.first().copied().unwrap_or(0)),
                Err(e) => Expect::Err(e),
            },
            Action::ReadStatus { caller } => {
                let got = self.mb.read_status(caller, now);
                let want = pre_model.status(caller, &cfg, now);
                if got != want && caller != cfg.fixed_end && caller != pre_model.owner {
                    out.add(PropertyId::DummyStatus, || format!("{caller} read {got:?}"));
                }
                Expect::Ok
            }
            Action::Tick => {
                self.now += 1;
                self.mb.expire_check(self.now);
                Expect::Ok
            }
            Action::Reset { caller, target } => {
                let blocked = reset_guard([&self.mb], target, now);
                if caller.is_rm() && blocked.is_none() {
                    let party = target == pre_model.owner || target == cfg.fixed_end;
                    if party && pre_model.live(now) {
                        out.add(PropertyId::ResetGuard, || format!("{target} reset during a live session"));
                    }
                }
                Expect::Ok
            }
            Action::RouteQuery => {
                let u = bounds.untrusted();
                let dma = self.route(u) == Route::Dma;
                if dma && pre_model.live(now) && pre_model.owner != u {
                    out.add(PropertyId::ArbiterExclusive, || format!("DMA enabled while {} holds the mailbox", pre_model.owner));
                }
                Expect::Ok
            }
        };

        let post_owner = self.mb.owner();
        let post_quota = self.mb.quota();
        let caller = a.caller();

        // Session bookkeeping follows the implementation.
        let data_op = matches!(a, Action::Write { .. } | Action::Read { .. });
        let session_changed = post_owner != pre_owner || matches!((a, &got), (Action::Delegate { .. }, Expect::Ok));
        if data_op && matches!(got, Expect::Ok | Expect::Read(_)) && caller == Some(pre_owner) && !pre_owner.is_rm() && caller != Some(cfg.fixed_end) {
            self.ghost.ops += 1;
            if let Some(MsgLimit::Finite(n)) = self.ghost.granted {
                if self.ghost.ops > n {
                    out.add(PropertyId::QuotaBound, || format!("{} operations on a quota of {n}", self.ghost.ops));
                }
            }
        }
        if session_changed {
            self.ghost = Ghost { ops: 0, granted: post_quota.filter(|_| post_owner != RM).map(|q| q.msgs) };
        }

        if let Some(d) = caller {
            let insider = d == pre_owner || (d.is_rm() && pre_owner.is_rm());
            if !insider && (post_owner != pre_owner || post_quota != pre_quota) {
                out.add(
                    PropertyId::OutsiderImmutability, ||
                    format!("{d} changed owner {pre_owner} -> {post_owner}, quota {pre_quota:?} -> {post_quota:?}"),
                );
            }
        }

        if let Some(q) = pre_quota {
            let yielded = matches!(a, Action::Yield { caller } if *caller == pre_owner);
            let exhausted = data_op && pre_model.live(now) && self.model.owner == RM && caller == Some(pre_owner);
            if !pre_owner.is_rm() && !yielded && !exhausted && self.now < q.deadline && post_owner != pre_owner {
                out.add(PropertyId::GuaranteedAccess, || format!("{pre_owner} lost the mailbox: {a}"));
            }
        }

        if let (Action::Read { caller }, Expect::Read(b)) = (a, &got) {
            if *caller == pre_model.reader(&cfg) && expect != Expect::Read(*b) {
                out.add(PropertyId::ReadWriteCorrect, || format!("read {b:#04x}, expected {expect:?}"));
            }
        }

        if data_op {
            let authorized = match a {
                Action::Write { caller, .. } => *caller == pre_model.writer(&cfg),
                Action::Read { caller } => *caller == pre_model.reader(&cfg),
                _ => true,
            };
            if !authorized && (got != Expect::Err(MailboxError::NoAccess) || self.mb.slot_bytes() != pre_slots) {
                out.add(PropertyId::OutsiderNoAccess, || format!("{a} returned {got:?}"));
            }
        }

        if pre_owner.is_rm() && !post_owner.is_rm() && !matches!(a, Action::Delegate { caller, .. } if caller.is_rm()) {
            out.add(PropertyId::DelegateOnlyByRm, || format!("{a} moved the mailbox to {post_owner}"));
        }

        if pre_owner != post_owner && !(pre_owner.is_rm() || post_owner.is_rm()) {
            out.add(PropertyId::TransitionsViaRm, || format!("owner {pre_owner} -> {post_owner}"));
        }

        if session_changed && self.mb.slot_bytes().iter().any(|&x| x != 0) {
            out.add(PropertyId::WipeOnTransition, || format!("queue bytes survive {a}"));
        }

        if got != expect {
            out.add(PropertyId::ModelConformance, || format!("{a}: implementation {got:?}, model {expect:?}"));
        }
        self.check_state(bounds, out);
        // A divergence is reported once; exploration then follows the
        // implementation.
        let queue: VecDeque<u8> = self.mb.queued().iter().map(|m| m.first().copied().unwrap_or(0)).collect();
        let quota = self.mb.quota().map(|q| (q.msgs, q.deadline));
        if self.model.owner != self.mb.owner() || self.model.quota != quota || self.model.queue != queue {
            self.model = Model { owner: self.mb.owner(), quota, queue };
        }
    }
}

// ---------------------------------------------------------------- results

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSummary {
    pub now: Tick,
    pub owner: DomainId,
    pub quota: Option<Quota>,
    pub queued: Vec<Vec<u8>>,
    pub slots_zero: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub mutant: Option<Mutant>,
    pub config: MailboxConfig,
    pub bounds: Bounds,
    pub initial: StateSummary,
    pub actions: Vec<Action>,
    pub property: PropertyId,
    pub detail: String,
    pub final_state: StateSummary,
}

impl Counterexample {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("counterexample serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreReport {
    pub mutant: Option<Mutant>,
    pub bounds: Bounds,
    pub states_explored: usize,
    pub transitions: usize,
    pub properties: Vec<PropertyId>,
    /// Shortest counterexample per violated property and role.
    pub violations: Vec<Counterexample>,
}

impl ExploreReport {
    pub fn violated(&self) -> BTreeSet<PropertyId> {
        self.violations.iter().map(|c| c.property).collect()
    }

    pub fn shortest(&self) -> Option<&Counterexample> {
        self.violations.iter().min_by_key(|c| c.len())
    }

    pub fn for_property(&self, p: PropertyId) -> Option<&Counterexample> {
        self.violations.iter().filter(|c| c.property == p).min_by_key(|c| c.len())
    }
}

struct Node {
    parent: Option<usize>,
    action: Option<Action>,
}

fn path(nodes: &[Node], mut i: usize) -> Vec<Action> {
    let mut out = Vec::new();
    while let Some(a) = &nodes[i].action {
        out.push(a.clone());
        i = nodes[i].parent.expect("non-root node has a parent");
    }
    out.reverse();
    out
}

/// Explores the shipped mailbox.
pub fn explore(bounds: &Bounds) -> Result<ExploreReport, HarnessError> {
    explore_mutant(bounds, None)
}

pub fn explore_mutant(bounds: &Bounds, mutant: Option<Mutant>) -> Result<ExploreReport, HarnessError> {
    bounds.validate()?;
    let actions = bounds.actions();
    let mut report = ExploreReport {
        mutant,
        bounds: bounds.clone(),
        states_explored: 0,
        transitions: 0,
        properties: PropertyId::ALL.to_vec(),
        violations: Vec::new(),
    };
    for role in [FixedRole::FixedReader, FixedRole::FixedWriter] {
        let cfg = bounds.config(role);
        let init = Composite::new(cfg.clone(), mutant);
        let initial = init.summary();
        let mut found: BTreeSet<PropertyId> = BTreeSet::new();
        let record = |report: &mut ExploreReport, found: &mut BTreeSet<PropertyId>, vs: Vec<Violation>, actions: Vec<Action>, at: &Composite| {
            for x in vs {
                found.insert(x.property);
                report.violations.push(Counterexample {
                    mutant,
                    config: cfg.clone(),
                    bounds: bounds.clone(),
                    initial: initial.clone(),
                    actions: actions.clone(),
                    property: x.property,
                    detail: x.detail,
                    final_state: at.summary(),
                });
            }
        };

        let mut seen: HashSet<[u8; 32]> = HashSet::new();
        let mut nodes = vec![Node { parent: None, action: None }];
        let mut frontier: VecDeque<(usize, usize, Composite)> = VecDeque::new();
        let mut sink = Sink::new(&found);
        init.check_state(bounds, &mut sink);
        let vs = sink.found;
        record(&mut report, &mut found, vs, Vec::new(), &init);
        seen.insert(init.key());
        frontier.push_back((0, 0, init));

        while let Some((idx, depth, state)) = frontier.pop_front() {
            report.states_explored += 1;
            if depth == bounds.horizon {
                continue;
            }
            for a in &actions {
                let mut next = state.clone();
                let mut sink = Sink::new(&found);
                next.step(a, bounds, &mut sink);
                let vs = sink.found;
                report.transitions += 1;
                if !vs.is_empty() {
                    let mut p = path(&nodes, idx);
                    p.push(a.clone());
                    record(&mut report, &mut found, vs, p, &next);
                }
                if seen.insert(next.key()) {
                    if seen.len() > bounds.max_states {
                        return Err(HarnessError::BoundsTooLarge { estimate: seen.len() as u64, ceiling: bounds.max_states });
                    }
                    nodes.push(Node { parent: Some(idx), action: Some(a.clone()) });
                    frontier.push_back((nodes.len() - 1, depth + 1, next));
                }
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayOutcome {
    Confirmed,
    NotReproduced,
}

/// Drives the production mailbox (with the counterexample's mutant, if any)
/// through the recorded actions and re-evaluates the property at the end.
pub fn replay(cex: &Counterexample) -> ReplayOutcome {
    let mut c = Composite::new(cex.config.clone(), cex.mutant);
    let known = BTreeSet::new();
    let mut last = Sink::new(&known);
    c.check_state(&cex.bounds, &mut last);
    for a in &cex.actions {
        last = Sink::new(&known);
        c.step(a, &cex.bounds, &mut last);
    }
    if last.found.iter().any(|x| x.property == cex.property) {
        ReplayOutcome::Confirmed
    } else {
        ReplayOutcome::NotReproduced
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Bounds {
        Bounds { horizon: 4, ..Bounds::small() }
    }

    #[test]
    fn shipped_mailbox_has_no_violations_at_small_bounds() {
        let r = explore(&Bounds::small()).unwrap();
        assert!(r.violations.is_empty(), "{:#?}", r.violations.first());
        assert!(r.states_explored > 100);
    }

    #[test]
    fn invariant_numbers_cover_one_to_thirteen() {
        let n: Vec<u8> = PropertyId::ALL.iter().filter_map(|p| p.invariant()).collect();
        assert_eq!(n, (1..=13).collect::<Vec<_>>());
        assert_eq!(PropertyId::ResetGuard.invariant(), None);
    }

    #[test]
    fn bad_bounds_are_rejected() {
        let b = Bounds { n_domains: 2, ..Bounds::default() };
        assert!(matches!(b.validate(), Err(HarnessError::InvalidBounds(_))));
        let b = Bounds { msg_quotas: vec![MsgLimit::Finite(0)], ..Bounds::default() };
        assert!(matches!(b.validate(), Err(HarnessError::InvalidBounds(_))));
        let b = Bounds { depth: 6, horizon: 30, ..Bounds::default() };
        assert!(matches!(explore(&b), Err(HarnessError::BoundsTooLarge { .. })));
    }

    #[test]
    fn model_agrees_with_a_hand_trace() {
        let b = Bounds::default();
        let cfg = b.config(FixedRole::FixedReader);
        let mut m = Model::new();
        let a = DomainId(2);
        assert_eq!(m.apply(&Action::Delegate { caller: RM, target: a, msgs: MsgLimit::Finite(2), ticks: 3 }, &cfg, 0), Expect::Ok);
        assert_eq!(m.apply(&Action::Write { caller: a, byte: 7 }, &cfg, 0), Expect::Ok);
        assert_eq!(m.apply(&Action::Read { caller: FIXED }, &cfg, 0), Expect::Read(7));
        assert_eq!(m.quota, Some((MsgLimit::Finite(1), 3)));
        assert_eq!(m.apply(&Action::Write { caller: a, byte: 8 }, &cfg, 0), Expect::Ok);
        assert_eq!(m.owner, RM);
        assert!(m.queue.is_empty());
    }

    #[test]
    fn unmetered_quota_is_caught_quickly() {
        let r = explore_mutant(&tiny(), Some(Mutant::QuotaUnmetered)).unwrap();
        let c = r.for_property(PropertyId::QuotaBound).expect("quota bound violated");
        assert!(c.len() <= 4, "{:?}", c.actions);
        assert_eq!(replay(c), ReplayOutcome::Confirmed);
    }

    #[test]
    fn skipped_wipe_violates_wipe_property() {
        let r = explore_mutant(&tiny(), Some(Mutant::WipeSkippedOnYield)).unwrap();
        assert!(r.violated().contains(&PropertyId::WipeOnTransition));
    }

    #[test]
    fn replay_against_fixed_code_does_not_reproduce() {
        let r = explore_mutant(&tiny(), Some(Mutant::ResetGuardIgnored)).unwrap();
        let mut c = r.for_property(PropertyId::ResetGuard).unwrap().clone();
        assert_eq!(replay(&c), ReplayOutcome::Confirmed);
        c.mutant = None;
        assert_eq!(replay(&c), ReplayOutcome::NotReproduced);
    }

    #[test]
    fn empty_replay_holds_on_the_initial_state() {
        let b = Bounds::small();
        let c = Counterexample {
            mutant: None,
            config: b.config(FixedRole::FixedWriter),
            bounds: b.clone(),
            initial: Composite::new(b.config(FixedRole::FixedWriter), None).summary(),
            actions: vec![],
            property: PropertyId::ResetDefault,
            detail: String::new(),
            final_state: Composite::new(b.config(FixedRole::FixedWriter), None).summary(),
        };
        assert_eq!(replay(&c), ReplayOutcome::NotReproduced);
        let j = c.to_json();
        assert_eq!(Counterexample::from_json(&j).unwrap(), c);
    }

    #[test]
    fn state_keys_are_stable() {
        let b = Bounds::small();
        let a = Composite::new(b.config(FixedRole::FixedReader), None);
        let mut x = a.clone();
        x.step(&Action::Tick, &b, &mut Sink::new(&BTreeSet::new()));
        assert_eq!(a.key(), Composite::new(b.config(FixedRole::FixedReader), None).key());
        assert_ne!(a.key(), x.key());
    }
}
