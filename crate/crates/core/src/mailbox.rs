//! The verifiably delegatable hardware mailbox.
//!
//! A mailbox is a bounded FIFO between a hard-wired *fixed end* and a
//! multiplexed *delegatable end*. The delegatable end belongs to the resource
//! manager after reset. The resource manager may hand it to one wired domain
//! under a [`Quota`]; from then on only the owner can give it back (yield),
//! or the quota runs out. Every ownership transition wipes the queue.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Logical clock value. One tick is one round of the platform step loop.
pub type Tick = u64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub u8);

impl DomainId {
    /// The resource manager always has id 0.
    pub const RESOURCE_MANAGER: DomainId = DomainId(0);

    pub fn is_rm(self) -> bool {
        self == Self::RESOURCE_MANAGER
    }
}

impl fmt::Debug for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}", self.0)
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MailboxId(pub u16);

impl fmt::Debug for MailboxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MB{}", self.0)
    }
}

impl fmt::Display for MailboxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Remaining message budget of a session.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum MsgLimit {
    Finite(u32),
    Infinite,
}

impl MsgLimit {
    pub fn is_exhausted(self) -> bool {
        self == MsgLimit::Finite(0)
    }

    /// `self >= other` where `Infinite` dominates every finite count.
    pub fn covers(self, other: MsgLimit) -> bool {
        match (self, other) {
            (MsgLimit::Infinite, _) => true,
            (MsgLimit::Finite(_), MsgLimit::Infinite) => false,
            (MsgLimit::Finite(a), MsgLimit::Finite(b)) => a >= b,
        }
    }

    pub fn to_wire(self) -> u32 {
        match self {
            MsgLimit::Finite(n) => n.min(u32::MAX - 1),
            MsgLimit::Infinite => u32::MAX,
        }
    }

    pub fn from_wire(v: u32) -> Self {
        if v == u32::MAX {
            MsgLimit::Infinite
        } else {
            MsgLimit::Finite(v)
        }
    }
}

impl fmt::Display for MsgLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MsgLimit::Finite(n) => write!(f, "{n}"),
            MsgLimit::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for MsgLimit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            MsgLimit::Finite(n) => s.serialize_u32(*n),
            MsgLimit::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for MsgLimit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(MsgLimit::Finite(n)),
            Raw::S(s) if s == "inf" => Ok(MsgLimit::Infinite),
            Raw::S(s) => Err(serde::de::Error::custom(format!("bad message limit {s:?}"))),
        }
    }
}

/// Delegation budget. The deadline is always finite.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct Quota {
    pub msgs: MsgLimit,
    pub deadline: Tick,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedRole {
    /// The fixed end dequeues; the delegatable end enqueues.
    FixedReader,
    /// The fixed end enqueues; the delegatable end dequeues.
    FixedWriter,
}

#[derive(Clone, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
pub struct MailboxConfig {
    pub id: MailboxId,
    #[serde(default)]
    pub name: String,
    pub fixed_end: DomainId,
    pub fixed_role: FixedRole,
    pub wired_delegates: BTreeSet<DomainId>,
    pub depth: usize,
    pub msg_size: usize,
}

impl MailboxConfig {
    pub fn validate(&self) -> Result<(), MailboxError> {
        let bad = |why: &str| Err(MailboxError::InvalidConfig(format!("mailbox {}: {why}", self.id)));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.msg_size == 0 {
            return bad("msg_size must be at least 1");
        }
        if self.wired_delegates.contains(&self.fixed_end) {
            return bad("fixed end is also wired to the delegatable end");
        }
        if !self.wired_delegates.contains(&DomainId::RESOURCE_MANAGER) {
            return bad("resource manager is not wired to the delegatable end");
        }
        Ok(())
    }

    /// Domain allowed to enqueue, given the current owner of the delegatable end.
    pub fn writer(&self, owner: DomainId) -> DomainId {
        match self.fixed_role {
            FixedRole::FixedReader => owner,
            FixedRole::FixedWriter => self.fixed_end,
        }
    }

    pub fn reader(&self, owner: DomainId) -> DomainId {
        match self.fixed_role {
            FixedRole::FixedReader => self.fixed_end,
            FixedRole::FixedWriter => owner,
        }
    }
}

/// Value of the status register as seen by one caller.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct MailboxStatus {
    pub owner: Option<DomainId>,
    pub msgs_left: MsgLimit,
    pub time_left: Tick,
    pub is_dummy: bool,
}

impl MailboxStatus {
    pub const DUMMY: MailboxStatus = MailboxStatus {
        owner: None,
        msgs_left: MsgLimit::Finite(0),
        time_left: 0,
        is_dummy: true,
    };
}

/// Known-bad variants of the trusted hardware, used to show that the
/// verification harness notices broken implementations.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutant {
    QuotaUnmetered,
    WipeSkippedOnYield,
    DummyLeaksOwner,
    NonRmDelegation,
    ResetGuardIgnored,
    ArbiterStuckDma,
}

impl Mutant {
    pub const ALL: [Mutant; 6] = [
        Mutant::QuotaUnmetered,
        Mutant::WipeSkippedOnYield,
        Mutant::DummyLeaksOwner,
        Mutant::NonRmDelegation,
        Mutant::ResetGuardIgnored,
        Mutant::ArbiterStuckDma,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MailboxError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("caller does not own the delegatable end")]
    NotOwner,
    #[error("target is not wired to the delegatable end")]
    NotWired,
    #[error("deadline is not in the future")]
    BadDeadline,
    #[error("no access")]
    NoAccess,
    #[error("queue full")]
    QueueFull,
    #[error("queue empty")]
    QueueEmpty,
    #[error("message larger than slot")]
    MsgTooLarge,
}

/// Quota effect of a successful data operation.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Metering {
    /// Fixed end, or resource-manager default ownership.
    Unmetered,
    /// Budget decremented (or infinite); session continues.
    Metered(MsgLimit),
    /// This operation used the last message; the session has ended and the
    /// queue has been wiped.
    Exhausted,
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct MailboxState {
    config: MailboxConfig,
    owner: DomainId,
    /// `None` is the resource manager's default, unmetered ownership.
    quota: Option<Quota>,
    slots: Vec<u8>,
    lens: Vec<usize>,
    head: usize,
    count: usize,
    mutant: Option<Mutant>,
}

impl MailboxState {
    pub fn new(config: MailboxConfig) -> Result<Self, MailboxError> {
        config.validate()?;
        let slots = vec![0u8; config.depth * config.msg_size];
        let lens = vec![0; config.depth];
        Ok(MailboxState {
            config,
            owner: DomainId::RESOURCE_MANAGER,
            quota: None,
            slots,
            lens,
            head: 0,
            count: 0,
            mutant: None,
        })
    }

    /// A deliberately broken mailbox for mutation testing.
    pub fn new_mutant(config: MailboxConfig, mutant: Mutant) -> Result<Self, MailboxError> {
        let mut mb = Self::new(config)?;
        mb.mutant = Some(mutant);
        Ok(mb)
    }

    pub fn config(&self) -> &MailboxConfig {
        &self.config
    }

    pub fn id(&self) -> MailboxId {
        self.config.id
    }

    pub fn owner(&self) -> DomainId {
        self.owner
    }

    pub fn quota(&self) -> Option<Quota> {
        self.quota
    }

    pub fn mutant(&self) -> Option<Mutant> {
        self.mutant
    }

    pub fn is_delegated(&self) -> bool {
        !self.owner.is_rm()
    }

    /// A live session at `now` (owner is not the resource manager and the
    /// deadline has not passed).
    pub fn session_active(&self, now: Tick) -> bool {
        match self.quota {
            Some(q) if self.is_delegated() => now < q.deadline,
            _ => false,
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_full(&self) -> bool {
        self.count == self.config.depth
    }

    /// Raw slot storage, for wipe checks.
    pub fn slot_bytes(&self) -> &[u8] {
        &self.slots
    }

    /// Queued messages, oldest first.
    pub fn queued(&self) -> Vec<Vec<u8>> {
        (0..self.count)
            .map(|i| {
                let slot = (self.head + i) % self.config.depth;
                let base = slot * self.config.msg_size;
                self.slots[base..base + self.lens[slot]].to_vec()
            })
            .collect()
    }

    /// Every field that affects future behaviour, in a fixed layout.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.slots.len() + 8 * self.lens.len() + 32);
        out.extend_from_slice(&self.config.id.0.to_le_bytes());
        out.push(self.owner.0);
        match self.quota {
            None => out.push(0),
            Some(q) => {
                out.push(1);
                out.extend_from_slice(&q.msgs.to_wire().to_le_bytes());
                out.extend_from_slice(&q.deadline.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.head as u32).to_le_bytes());
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        for &l in &self.lens {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.slots);
        out
    }

    fn wipe(&mut self) {
        self.slots.fill(0);
        self.lens.fill(0);
        self.head = 0;
        self.count = 0;
    }

    fn revert_to_default(&mut self) {
        self.owner = DomainId::RESOURCE_MANAGER;
        self.quota = None;
        self.wipe();
    }

    pub fn delegate(
        &mut self,
        caller: DomainId,
        target: DomainId,
        quota: Quota,
        now: Tick,
    ) -> Result<(), MailboxError> {
        self.expire_check(now);
        let caller_ok = caller.is_rm() || self.mutant == Some(Mutant::NonRmDelegation);
        if !caller_ok || self.is_delegated() {
            return Err(MailboxError::NotOwner);
        }
        if target.is_rm() || !self.config.wired_delegates.contains(&target) {
            return Err(MailboxError::NotWired);
        }
        if quota.deadline <= now {
            return Err(MailboxError::BadDeadline);
        }
        self.owner = target;
        self.quota = Some(quota);
        self.wipe();
        Ok(())
    }

    pub fn yield_access(&mut self, caller: DomainId, now: Tick) -> Result<(), MailboxError> {
        self.expire_check(now);
        if caller.is_rm() || caller != self.owner {
            return Err(MailboxError::NotOwner);
        }
        if self.mutant == Some(Mutant::WipeSkippedOnYield) {
            self.owner = DomainId::RESOURCE_MANAGER;
            self.quota = None;
        } else {
            self.revert_to_default();
        }
        Ok(())
    }

    fn meter(&mut self, caller: DomainId) -> Metering {
        if caller != self.owner || self.config.fixed_end == caller {
            return Metering::Unmetered;
        }
        let Some(q) = self.quota.as_mut() else {
            return Metering::Unmetered;
        };
        if self.mutant == Some(Mutant::QuotaUnmetered) {
            return Metering::Metered(q.msgs);
        }
        match q.msgs {
            MsgLimit::Infinite => Metering::Metered(MsgLimit::Infinite),
            MsgLimit::Finite(n) => {
                let left = n.saturating_sub(1);
                q.msgs = MsgLimit::Finite(left);
                if left == 0 {
                    self.revert_to_default();
                    Metering::Exhausted
                } else {
                    Metering::Metered(MsgLimit::Finite(left))
                }
            }
        }
    }

    pub fn write(&mut self, caller: DomainId, msg: &[u8], now: Tick) -> Result<Metering, MailboxError> {
        self.expire_check(now);
        if caller != self.config.writer(self.owner) {
            return Err(MailboxError::NoAccess);
        }
        if msg.len() > self.config.msg_size {
            return Err(MailboxError::MsgTooLarge);
        }
        if self.is_full() {
            return Err(MailboxError::QueueFull);
        }
        let slot = (self.head + self.count) % self.config.depth;
        let base = slot * self.config.msg_size;
        self.slots[base..base + msg.len()].copy_from_slice(msg);
        self.lens[slot] = msg.len();
        self.count += 1;
        Ok(self.meter(caller))
    }

    pub fn read(&mut self, caller: DomainId, now: Tick) -> Result<(Vec<u8>, Metering), MailboxError> {
        self.expire_check(now);
        if caller != self.config.reader(self.owner) {
            return Err(MailboxError::NoAccess);
        }
        if self.is_empty() {
            return Err(MailboxError::QueueEmpty);
        }
        let slot = self.head;
        let base = slot * self.config.msg_size;
        let msg = self.slots[base..base + self.lens[slot]].to_vec();
        self.slots[base..base + self.config.msg_size].fill(0);
        self.lens[slot] = 0;
        self.head = (self.head + 1) % self.config.depth;
        self.count -= 1;
        let metering = self.meter(caller);
        Ok((msg, metering))
    }

    /// Status register read. Total: outsiders get [`MailboxStatus::DUMMY`].
    ///
    /// Default ownership reports `msgs_left = inf, time_left = 0`.
    pub fn read_status(&self, caller: DomainId, now: Tick) -> MailboxStatus {
        let expired = self.is_delegated() && !self.session_active(now);
        let (owner, quota) = if expired {
            (DomainId::RESOURCE_MANAGER, None)
        } else {
            (self.owner, self.quota)
        };
        if caller != owner && caller != self.config.fixed_end {
            if self.mutant == Some(Mutant::DummyLeaksOwner) {
                return MailboxStatus { owner: Some(owner), ..MailboxStatus::DUMMY };
            }
            return MailboxStatus::DUMMY;
        }
        match quota {
            None => MailboxStatus {
                owner: Some(owner),
                msgs_left: MsgLimit::Infinite,
                time_left: 0,
                is_dummy: false,
            },
            Some(q) => MailboxStatus {
                owner: Some(owner),
                msgs_left: q.msgs,
                time_left: q.deadline.saturating_sub(now),
                is_dummy: false,
            },
        }
    }

    /// Time-limit expiration. Returns true if a session ended.
    pub fn expire_check(&mut self, now: Tick) -> bool {
        match self.quota {
            Some(q) if self.is_delegated() && now >= q.deadline => {
                self.revert_to_default();
                true
            }
            _ => false,
        }
    }

    pub fn hw_reset(&mut self) {
        self.revert_to_default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RM: DomainId = DomainId::RESOURCE_MANAGER;
    const IO: DomainId = DomainId(1);
    const TEE1: DomainId = DomainId(2);
    const TEE2: DomainId = DomainId(3);

    fn cfg(role: FixedRole, depth: usize, msg_size: usize) -> MailboxConfig {
        MailboxConfig {
            id: MailboxId(0),
            name: "test".into(),
            fixed_end: IO,
            fixed_role: role,
            wired_delegates: [RM, TEE1, TEE2].into_iter().collect(),
            depth,
            msg_size,
        }
    }

    fn quota(msgs: u32, deadline: Tick) -> Quota {
        Quota { msgs: MsgLimit::Finite(msgs), deadline }
    }

    #[test]
    fn new_mailbox_is_rm_owned_and_zeroed() {
        for size in [64, 512] {
            let mb = MailboxState::new(cfg(FixedRole::FixedReader, 4, size)).unwrap();
            assert_eq!(mb.owner(), RM);
            assert_eq!(mb.quota(), None);
            assert!(mb.is_empty());
            assert_eq!(mb.slot_bytes().len(), 4 * size);
            assert!(mb.slot_bytes().iter().all(|&b| b == 0));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = cfg(FixedRole::FixedReader, 4, 64);
        c.wired_delegates.insert(IO);
        assert!(matches!(MailboxState::new(c), Err(MailboxError::InvalidConfig(_))));
        let mut c = cfg(FixedRole::FixedReader, 4, 64);
        c.wired_delegates.remove(&RM);
        assert!(matches!(MailboxState::new(c), Err(MailboxError::InvalidConfig(_))));
        assert!(MailboxState::new(cfg(FixedRole::FixedReader, 0, 64)).is_err());
        assert!(MailboxState::new(cfg(FixedRole::FixedReader, 4, 0)).is_err());
    }

    #[test]
    fn delegation_is_rm_only_and_irrevocable() {
        let mut mb = MailboxState::new(cfg(FixedRole::FixedReader, 4, 64)).unwrap();
        assert_eq!(mb.delegate(TEE1, TEE2, quota(4, 100), 0), Err(MailboxError::NotOwner));
        mb.delegate(RM, TEE1, quota(4, 100), 0).unwrap();
        assert_eq!(
            mb.read_status(TEE1, 0),
            MailboxStatus { owner: Some(TEE1), msgs_left: MsgLimit::Finite(4), time_left: 100, is_dummy: false }
        );
        assert_eq!(mb.delegate(RM, TEE2, quota(4, 100), 0), Err(MailboxError::NotOwner));
        assert_eq!(mb.owner(), TEE1);
    }

    #[test]
    fn delegation_checks_wiring_and_deadline() {
        let mut mb = MailboxState::new(cfg(FixedRole::FixedReader, 4, 64)).unwrap();
        assert_eq!(mb.delegate(RM, DomainId(9), quota(1, 10), 0), Err(MailboxError::NotWired));
        assert_eq!(mb.delegate(RM, IO, quota(1, 10), 0), Err(MailboxError::NotWired));
        assert_eq!(mb.delegate(RM, TEE1, quota(1, 5), 5), Err(MailboxError::BadDeadline));
        assert_eq!(mb.owner(), RM);
    }

    #[test]
    fn yield_returns_to_rm_and_wipes() {
        let mut mb = MailboxState::new(cfg(FixedRole::FixedReader, 4, 64)).unwrap();
        mb.delegate(RM, TEE1, quota(4, 100), 0).unwrap();
        mb.write(TEE1, b"secret", 1).unwrap();
        assert_eq!(mb.yield_access(TEE2, 2), Err(MailboxError::NotOwner));
        mb.yield_access(TEE1, 2).unwrap();
        assert_eq!(mb.owner(), RM);
        assert_eq!(mb.quota(), None);
        assert!(mb.is_empty());
        assert!(mb.slot_bytes().iter().all(|&b| b == 0));
        assert_eq!(mb.yield_access(RM, 3), Err(MailboxError::NotOwner));
    }

    #[test]
    fn metered_writes_expire_on_last_message() {
        let mut mb = MailboxState::new(cfg(FixedRole::FixedReader, 4, 64)).unwrap();
        mb.delegate(RM, TEE1, quota(2, 100), 0).unwrap();
        assert_eq!(mb.write(TEE1, b"a", 1), Ok(Metering::Metered(MsgLimit::Finite(1))));
        assert_eq!(mb.write(TEE1, b"b", 1), Ok(Metering::Exhausted));
        assert_eq!(mb.owner(), RM);
        assert!(mb.is_empty());
        assert!(mb.slot_bytes().iter().all(|&b| b == 0));
    }

    #[test]
    fn outsiders_get_no_access_and_queue_is_untouched() {
        let mut mb = MailboxState::new(cfg(FixedRole::FixedReader, 4, 64)).unwrap();
        mb.delegate(RM, TEE1, quota(4, 100), 0).unwrap();
        mb.write(TEE1, b"x", 1).unwrap();
        let before = mb.clone();
        assert_eq!(mb.write(TEE2, b"evil", 1), Err(MailboxError::NoAccess));
        assert_eq!(mb.read(TEE2, 1), Err(MailboxError::NoAccess));
        assert_eq!(mb.write(RM, b"evil", 1), Err(MailboxError::NoAccess));
        assert_eq!(mb, before);
    }

    #[test]
    fn fixed_reader_is_unmetered_and_fifo() {
        let mut mb = MailboxState::new(cfg(FixedRole::FixedReader, 4, 64)).unwrap();
        mb.delegate(RM, TEE1, quota(4, 100), 0).unwrap();
        mb.write(TEE1, &[7u8; 64], 1).unwrap();
        mb.write(TEE1, b"second", 1).unwrap();
        let (m, metering) = mb.read(IO, 2).unwrap();
        assert_eq!(m, vec![7u8; 64]);
        assert_eq!(metering, Metering::Unmetered);
        assert_eq!(mb.read(IO, 2).unwrap().0, b"second");
        assert_eq!(mb.read(IO, 2), Err(MailboxError::QueueEmpty));
        assert!(mb.slot_bytes().iter().all(|&b| b == 0));
        assert_eq!(mb.quota().unwrap().msgs, MsgLimit::Finite(2));
    }

    #[test]
    fn delegatable_reader_expires_after_last_dequeue() {
        let mut mb = MailboxState::new(cfg(FixedRole::FixedWriter, 4, 64)).unwrap();
        mb.delegate(RM, TEE1, quota(1, 100), 0).unwrap();
        mb.write(IO, b"one", 1).unwrap();
        mb.write(IO, b"two", 1).unwrap();
        assert_eq!(mb.read(TEE1, 2), Ok((b"one".to_vec(), Metering::Exhausted)));
        assert_eq!(mb.owner(), RM);
        assert!(mb.is_empty());
    }

    #[test]
    fn failures_do_not_consume_quota() {
        let mut mb = MailboxState::new(cfg(FixedRole::FixedReader, 1, 4)).unwrap();
        mb.delegate(RM, TEE1, quota(3, 100), 0).unwrap();
        assert_eq!(mb.write(TEE1, b"too long", 1), Err(MailboxError::MsgTooLarge));
        mb.write(TEE1, b"ok", 1).unwrap();
        assert_eq!(mb.write(TEE1, b"ok", 1), Err(MailboxError::QueueFull));
        assert_eq!(mb.quota().unwrap().msgs, MsgLimit::Finite(2));
        let mut mb = MailboxState::new(cfg(FixedRole::FixedWriter, 1, 4)).unwrap();
        mb.delegate(RM, TEE1, quota(3, 100), 0).unwrap();
        assert_eq!(mb.read(TEE1, 1), Err(MailboxError::QueueEmpty));
        assert_eq!(mb.quota().unwrap().msgs, MsgLimit::Finite(3));
    }

    #[test]
    fn status_views() {
        let mut mb = MailboxState::new(cfg(FixedRole::FixedReader, 4, 64)).unwrap();
        mb.delegate(RM, TEE1, quota(4, 100), 0).unwrap();
        assert_eq!(mb.read_status(TEE2, 0), MailboxStatus::DUMMY);
        assert_eq!(mb.read_status(RM, 0), MailboxStatus::DUMMY);
        assert_eq!(mb.read_status(IO, 40), mb.read_status(TEE1, 40));
        assert_eq!(mb.read_status(IO, 40).time_left, 60);
        let fresh = MailboxState::new(cfg(FixedRole::FixedReader, 4, 64)).unwrap();
        assert_eq!(fresh.read_status(IO, 0).owner, Some(RM));
        assert_eq!(fresh.read_status(TEE1, 0), MailboxStatus::DUMMY);
    }

    #[test]
    fn expire_check_boundary() {
        let mut mb = MailboxState::new(cfg(FixedRole::FixedReader, 4, 64)).unwrap();
        mb.delegate(RM, TEE1, quota(4, 10), 0).unwrap();
        mb.write(TEE1, b"pending", 1).unwrap();
        assert!(!mb.expire_check(9));
        assert_eq!(mb.owner(), TEE1);
        assert!(mb.expire_check(10));
        assert_eq!(mb.owner(), RM);
        assert!(mb.slot_bytes().iter().all(|&b| b == 0));
        assert!(!mb.expire_check(1000));
    }

    #[test]
    fn infinite_message_quota_never_exhausts() {
        let mut mb = MailboxState::new(cfg(FixedRole::FixedReader, 2, 8)).unwrap();
        mb.delegate(RM, TEE1, Quota { msgs: MsgLimit::Infinite, deadline: 50 }, 0).unwrap();
        for _ in 0..10 {
            assert_eq!(mb.write(TEE1, b"x", 1), Ok(Metering::Metered(MsgLimit::Infinite)));
            mb.read(IO, 1).unwrap();
        }
        assert_eq!(mb.owner(), TEE1);
    }

    #[test]
    fn hw_reset_matches_new() {
        let fresh = MailboxState::new(cfg(FixedRole::FixedReader, 4, 64)).unwrap();
        let mut mb = fresh.clone();
        mb.delegate(RM, TEE1, quota(4, 10), 0).unwrap();
        mb.write(TEE1, b"abc", 1).unwrap();
        mb.hw_reset();
        assert_eq!(mb, fresh);
        mb.hw_reset();
        assert_eq!(mb, fresh);
    }

    #[test]
    fn msg_limit_serde() {
        assert_eq!(serde_json::to_string(&MsgLimit::Infinite).unwrap(), "\"inf\"");
        assert_eq!(serde_json::from_str::<MsgLimit>("7").unwrap(), MsgLimit::Finite(7));
        assert!(serde_json::from_str::<MsgLimit>("\"lots\"").is_err());
        assert!(MsgLimit::Infinite.covers(MsgLimit::Finite(3)));
        assert!(!MsgLimit::Finite(3).covers(MsgLimit::Infinite));
    }
}
