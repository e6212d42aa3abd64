//! Random operation sequences against the mailbox, compared with a small
//! queue-and-owner reference.

use std::collections::{BTreeSet, VecDeque};

use proptest::prelude::*;

use splitmachine::mailbox::{
    DomainId, FixedRole, MailboxConfig, MailboxError, MailboxId, MailboxState, MailboxStatus, Metering, MsgLimit,
    Quota, Tick,
};

const RM: DomainId = DomainId(0);
const FIXED: DomainId = DomainId(1);
const UNWIRED: DomainId = DomainId(4);

#[derive(Clone, Debug)]
enum Op {
    Delegate { caller: u8, target: u8, msgs: Option<u32>, ttl: Tick },
    Yield(u8),
    Write(u8, Vec<u8>),
    Read(u8),
    Status(u8),
    Tick(Tick),
    Reset,
}

fn op() -> impl Strategy<Value = Op> {
    let who = 0u8..5;
    prop_oneof![
        (who.clone(), who.clone(), proptest::option::of(0u32..4), 0u64..6)
            .prop_map(|(caller, target, msgs, ttl)| Op::Delegate { caller, target, msgs, ttl }),
        who.clone().prop_map(Op::Yield),
        (who.clone(), proptest::collection::vec(any::<u8>(), 0..10)).prop_map(|(w, m)| Op::Write(w, m)),
        who.clone().prop_map(Op::Read),
        who.prop_map(Op::Status),
        (0u64..4).prop_map(Op::Tick),
        Just(Op::Reset),
    ]
}

#[derive(Clone)]
struct Reference {
    role: FixedRole,
    depth: usize,
    size: usize,
    owner: DomainId,
    msgs: MsgLimit,
    deadline: Option<Tick>,
    queue: VecDeque<Vec<u8>>,
}

impl Reference {
    fn wired(d: DomainId) -> bool {
        matches!(d.0, 0 | 2 | 3)
    }

    fn revert(&mut self) {
        self.owner = RM;
        self.deadline = None;
        self.msgs = MsgLimit::Infinite;
        self.queue.clear();
    }

    fn expire(&mut self, now: Tick) {
        if self.deadline.is_some_and(|d| now >= d) {
            self.revert();
        }
    }

    fn writer(&self) -> DomainId {
        if self.role == FixedRole::FixedReader { self.owner } else { FIXED }
    }

    fn reader(&self) -> DomainId {
        if self.role == FixedRole::FixedReader { FIXED } else { self.owner }
    }

    fn meter(&mut self, caller: DomainId) -> Metering {
        if caller != self.owner || self.deadline.is_none() {
            return Metering::Unmetered;
        }
        match self.msgs {
            MsgLimit::Infinite => Metering::Metered(MsgLimit::Infinite),
            MsgLimit::Finite(n) if n <= 1 => {
                self.revert();
                Metering::Exhausted
            }
            MsgLimit::Finite(n) => {
                self.msgs = MsgLimit::Finite(n - 1);
                Metering::Metered(self.msgs)
            }
        }
    }
}

fn config(role: FixedRole, depth: usize, size: usize) -> MailboxConfig {
    MailboxConfig {
        id: MailboxId(0),
        name: "prop".into(),
        fixed_end: FIXED,
        fixed_role: role,
        wired_delegates: BTreeSet::from([RM, DomainId(2), DomainId(3)]),
        depth,
        msg_size: size,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn matches_reference(
        reader in any::<bool>(),
        depth in 1usize..4,
        size in 1usize..8,
        ops in proptest::collection::vec(op(), 0..60),
    ) {
        let role = if reader { FixedRole::FixedReader } else { FixedRole::FixedWriter };
        let mut mb = MailboxState::new(config(role, depth, size)).unwrap();
        let mut r = Reference {
            role, depth, size,
            owner: RM, msgs: MsgLimit::Infinite, deadline: None, queue: VecDeque::new(),
        };
        let mut now: Tick = 0;
        for op in ops {
            let before_owner = r.owner;
            match op {
                Op::Delegate { caller, target, msgs, ttl } => {
                    let (c, t) = (DomainId(caller), DomainId(target));
                    let msgs = msgs.map_or(MsgLimit::Infinite, MsgLimit::Finite);
                    let got = mb.delegate(c, t, Quota { msgs, deadline: now + ttl }, now);
                    r.expire(now);
                    let want = if c != RM || r.owner != RM {
                        Err(MailboxError::NotOwner)
                    } else if t == RM || !Reference::wired(t) {
                        Err(MailboxError::NotWired)
                    } else if ttl == 0 {
                        Err(MailboxError::BadDeadline)
                    } else {
                        r.owner = t;
                        r.msgs = msgs;
                        r.deadline = Some(now + ttl);
                        r.queue.clear();
                        Ok(())
                    };
                    prop_assert_eq!(got, want);
                }
                Op::Yield(c) => {
                    let c = DomainId(c);
                    let got = mb.yield_access(c, now);
                    r.expire(now);
                    let want = if c == RM || c != r.owner { Err(MailboxError::NotOwner) } else { r.revert(); Ok(()) };
                    prop_assert_eq!(got, want);
                }
                Op::Write(c, msg) => {
                    let c = DomainId(c);
                    let got = mb.write(c, &msg, now);
                    r.expire(now);
                    let want = if c != r.writer() {
                        Err(MailboxError::NoAccess)
                    } else if msg.len() > r.size {
                        Err(MailboxError::MsgTooLarge)
                    } else if r.queue.len() == r.depth {
                        Err(MailboxError::QueueFull)
                    } else {
                        r.queue.push_back(msg);
                        Ok(r.meter(c))
                    };
                    prop_assert_eq!(got, want);
                }
                Op::Read(c) => {
                    let c = DomainId(c);
                    let got = mb.read(c, now);
                    r.expire(now);
                    let want = if c != r.reader() {
                        Err(MailboxError::NoAccess)
                    } else if let Some(m) = r.queue.pop_front() {
                        Ok((m, r.meter(c)))
                    } else {
                        Err(MailboxError::QueueEmpty)
                    };
                    prop_assert_eq!(got, want);
                }
                Op::Status(c) => {
                    let c = DomainId(c);
                    let s = mb.read_status(c, now);
                    let mut view = r.clone();
                    view.expire(now);
                    if c != view.owner && c != FIXED {
                        prop_assert_eq!(s, MailboxStatus::DUMMY);
                    } else {
                        prop_assert_eq!(s.owner, Some(view.owner));
                        prop_assert!(!s.is_dummy);
                        prop_assert_eq!(s.msgs_left, view.msgs);
                        prop_assert_eq!(s.time_left, view.deadline.map_or(0, |d| d - now));
                    }
                }
                Op::Tick(dt) => now += dt,
                Op::Reset => {
                    mb.hw_reset();
                    r.revert();
                }
            }
            prop_assert_eq!(mb.owner(), r.owner);
            prop_assert_eq!(mb.queued(), r.queue.iter().cloned().collect::<Vec<_>>());
            if mb.owner() != before_owner {
                prop_assert!(mb.is_empty(), "ownership changed without a wipe");
            }
            prop_assert!(mb.owner() != UNWIRED && mb.owner() != FIXED);
            prop_assert_eq!(mb.quota().is_some(), mb.owner() != RM);
        }
    }

    #[test]
    fn fixed_end_always_has_its_half(
        reader in any::<bool>(),
        ops in proptest::collection::vec(op(), 0..40),
    ) {
        let role = if reader { FixedRole::FixedReader } else { FixedRole::FixedWriter };
        let mut mb = MailboxState::new(config(role, 2, 4)).unwrap();
        let mut now = 0;
        for op in ops {
            match op {
                Op::Delegate { caller, target, msgs, ttl } => {
                    let q = Quota { msgs: msgs.map_or(MsgLimit::Infinite, MsgLimit::Finite), deadline: now + ttl };
                    let _ = mb.delegate(DomainId(caller), DomainId(target), q, now);
                }
                Op::Yield(c) => { let _ = mb.yield_access(DomainId(c), now); }
                Op::Write(c, m) => { let _ = mb.write(DomainId(c), &m, now); }
                Op::Read(c) => { let _ = mb.read(DomainId(c), now); }
                Op::Status(_) => {}
                Op::Tick(dt) => now += dt,
                Op::Reset => mb.hw_reset(),
            }
            let mut probe = mb.clone();
            let res = if reader { probe.read(FIXED, now).map(|_| ()) } else { probe.write(FIXED, b"x", now).map(|_| ()) };
            prop_assert!(!matches!(res, Err(MailboxError::NoAccess)));
            prop_assert!(!mb.read_status(FIXED, now).is_dummy);
        }
    }
}
