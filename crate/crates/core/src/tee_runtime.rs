//! Library linked into programs running in a TEE domain.
//!
//! Programs are driven from the host: every runtime call advances the
//! machine through [`Machine::act`], which gives the TEE domain exactly one
//! quantum per tick while all other domains run their firmware. A call that
//! waits for a reply therefore spends real ticks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::attestation::{boot_pcr, used_pcr, verify_quote, Nonce, Quote, RejectReason, Verdict};
use crate::io_services::{ports, Ports};
use crate::mailbox::{DomainId, MailboxError, MailboxId, Metering, MsgLimit, Tick};
use crate::manifest::{program_credential, DeviceKind, DomainKind, Endpoint};
use crate::platform::{DomainCtx, Machine};
use crate::protocol::{self, fragment, op, resource, ErrCode, Frame, Reassembler, RmRequest};
use crate::resource_manager::lookup_resource;
use crate::trace::EventKind;

pub use crate::crypto::{ae_open, ae_seal, hash, mac, mac_verify, Digest};

/// Messages kept back on every mailbox so a session can still be closed.
pub const DEFAULT_RESERVE: u32 = 2;
pub const DEFAULT_GRANT_TIMEOUT: Tick = 5_000;
/// Largest PRINT payload that fits a control-plane slot.
const PRINT_CHUNK: usize = 60;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TeeError {
    #[error("grant-timeout")]
    GrantTimeout,
    #[error("policy-denied")]
    Denied,
    #[error("status-mismatch: {0}")]
    StatusMismatch(String),
    #[error("attest-reject: {0:?}")]
    AttestReject(RejectReason),
    #[error("stale-domain")]
    StaleDomain,
    #[error("session not verified")]
    NotVerified,
    #[error("already-ended")]
    Ended,
    #[error("session expired")]
    Expired,
    #[error("quota reserve reached on mailbox {0}")]
    QuotaReserve(MailboxId),
    #[error("wrong session kind")]
    WrongKind,
    #[error("service error: {}", .0.name())]
    Service(ErrCode),
    #[error("mailbox: {0}")]
    Mailbox(MailboxError),
    #[error("tpm error")]
    Tpm,
    #[error("timeout")]
    Timeout,
}

impl TeeError {
    /// Short name used in scenario reports.
    pub fn kind(&self) -> &'static str {
        match self {
            TeeError::GrantTimeout => "grant-timeout",
            TeeError::Denied => "policy-denied",
            TeeError::StatusMismatch(_) => "status-mismatch",
            TeeError::AttestReject(_) => "attest-reject",
            TeeError::StaleDomain => "stale-domain",
            TeeError::NotVerified => "not-verified",
            TeeError::Ended => "already-ended",
            TeeError::Expired => "expired",
            TeeError::QuotaReserve(_) => "quota-reserve",
            TeeError::WrongKind => "wrong-kind",
            TeeError::Service(c) => c.name(),
            TeeError::Mailbox(_) => "no-access",
            TeeError::Tpm => "tpm",
            TeeError::Timeout => "timeout",
        }
    }
}

/// Reported after every metered operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuotaUpdate {
    pub tick: Tick,
    pub mailbox: MailboxId,
    pub msgs_left: MsgLimit,
    pub time_left: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub resource: u8,
    /// I/O domain, or the peer TEE for an IPC channel.
    pub domain: DomainId,
    pub device: Option<DeviceKind>,
    pub ports: Option<Ports>,
    pub mailboxes: Vec<MailboxId>,
    pub requested: RmRequest,
    pub deadline: Tick,
    pub left: BTreeMap<MailboxId, MsgLimit>,
    pub verified: bool,
    pub freshness_checked: bool,
    pub quote: Option<Quote>,
    ended: bool,
    rx: Reassembler,
}

impl Session {
    pub fn is_ended(&self) -> bool {
        self.ended
    }

    fn ports(&self) -> Result<Ports, TeeError> {
        self.ports.ok_or(TeeError::WrongKind)
    }
}

type QuotaCallback = Box<dyn FnMut(&QuotaUpdate)>;

pub struct TeeRuntime {
    pub id: DomainId,
    pub reserve: u32,
    pub grant_timeout: Tick,
    /// Every quota update seen, in order.
    pub updates: Vec<QuotaUpdate>,
    callback: Option<QuotaCallback>,
}

impl fmt::Debug for TeeRuntime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TeeRuntime")
            .field("id", &self.id)
            .field("reserve", &self.reserve)
            .field("updates", &self.updates.len())
            .finish()
    }
}

/// Per-call scratch carried into a quantum.
#[derive(Default)]
struct Meter {
    updates: Vec<QuotaUpdate>,
}

impl Meter {
    fn record(&mut self, ctx: &DomainCtx<'_>, s: &mut Session, mb: MailboxId, m: Metering) {
        let left = match m {
            Metering::Unmetered => return,
            Metering::Metered(l) => l,
            Metering::Exhausted => MsgLimit::Finite(0),
        };
        s.left.insert(mb, left);
        let time_left = s.deadline.saturating_sub(ctx.now());
        self.updates.push(QuotaUpdate { tick: ctx.now(), mailbox: mb, msgs_left: left, time_left });
    }
}

fn check_reserve(s: &Session, mb: MailboxId, reserve: u32, now: Tick) -> Result<(), TeeError> {
    if now >= s.deadline {
        return Err(TeeError::Expired);
    }
    match s.left.get(&mb) {
        Some(MsgLimit::Finite(n)) if *n <= reserve => Err(TeeError::QuotaReserve(mb)),
        _ => Ok(()),
    }
}

fn send(
    ctx: &mut DomainCtx<'_>,
    meter: &mut Meter,
    s: &mut Session,
    mb: MailboxId,
    frame: &Frame,
    reserve: Option<u32>,
) -> Result<bool, TeeError> {
    if let Some(r) = reserve {
        check_reserve(s, mb, r, ctx.now())?;
    }
    match ctx.send(mb, frame) {
        Ok(m) => {
            meter.record(ctx, s, mb, m);
            Ok(true)
        }
        Err(MailboxError::QueueFull) => Ok(false),
        Err(e) => Err(TeeError::Mailbox(e)),
    }
}

fn recv(ctx: &mut DomainCtx<'_>, meter: &mut Meter, s: &mut Session, mb: MailboxId) -> Result<Option<Frame>, TeeError> {
    match ctx.mb_read_metered(mb) {
        Ok((bytes, m)) => {
            meter.record(ctx, s, mb, m);
            Ok(Frame::decode(&bytes).ok())
        }
        Err(MailboxError::QueueEmpty) => Ok(None),
        Err(e) => Err(TeeError::Mailbox(e)),
    }
}

fn service_result(f: Frame) -> Result<Frame, TeeError> {
    if f.op == op::ERROR {
        Err(TeeError::Service(f.error_code().unwrap_or(ErrCode::BadRequest)))
    } else {
        Ok(f)
    }
}

impl TeeRuntime {
    pub fn new(id: DomainId) -> Self {
        TeeRuntime { id, reserve: DEFAULT_RESERVE, grant_timeout: DEFAULT_GRANT_TIMEOUT, updates: Vec::new(), callback: None }
    }

    pub fn set_quota_callback(&mut self, cb: impl FnMut(&QuotaUpdate) + 'static) {
        self.callback = Some(Box::new(cb));
    }

    fn flush(&mut self, meter: Meter) {
        for u in meter.updates {
            if let Some(cb) = self.callback.as_mut() {
                cb(&u);
            }
            self.updates.push(u);
        }
    }

    /// Runs quanta until `f` yields a value or `limit` is reached.
    fn wait<T>(
        &mut self,
        m: &mut Machine,
        limit: Tick,
        mut f: impl FnMut(&mut DomainCtx<'_>, &mut Meter) -> Option<Result<T, TeeError>>,
    ) -> Result<T, TeeError> {
        loop {
            let mut meter = Meter::default();
            let out = m.act(self.id, |ctx| f(ctx, &mut meter));
            self.flush(meter);
            if let Some(r) = out {
                return r;
            }
            if m.now() >= limit {
                return Err(TeeError::Timeout);
            }
        }
    }

    fn note(&self, m: &mut Machine, event: EventKind, detail: String) {
        m.with_ctx(self.id, |ctx| ctx.emit(event, None, detail));
    }

    /// Asks the manager for `req`, then checks ownership and quota on every
    /// granted mailbox, the measurement of the resource domain and, for
    /// storage, authenticates to the program's partition.
    pub fn request_and_verify(
        &mut self,
        m: &mut Machine,
        req: RmRequest,
        expected_image: Digest,
        nonce: Nonce,
    ) -> Result<Session, TeeError> {
        let me = self.id;
        let Some(res) = lookup_resource(m.hw().manifest(), me, req.resource) else {
            return Err(TeeError::Denied);
        };
        let requested_at = m.now();
        let rm = Endpoint::Domain(DomainId::RESOURCE_MANAGER);
        let limit = requested_at + self.grant_timeout;
        let mut sent = false;
        let ids = self
            .wait(m, limit, |ctx, _| {
                if !sent {
                    sent = ctx.q_send(rm, &req.to_frame()).is_ok();
                    return None;
                }
                while let Some(f) = ctx.q_recv(rm) {
                    let Ok(f) = f else { continue };
                    if f.payload.first() != Some(&req.resource) {
                        continue;
                    }
                    match f.op {
                        op::RM_GRANT => return Some(Ok(protocol::parse_grant(&f).map(|(_, ids)| ids).unwrap_or_default())),
                        op::RM_DENIED => return Some(Err(TeeError::Denied)),
                        _ => {}
                    }
                }
                None
            })
            .map_err(|e| if e == TeeError::Timeout { TeeError::GrantTimeout } else { e })?;

        let manifest = m.hw().manifest();
        let mut session = Session {
            resource: req.resource,
            domain: res.domain,
            device: res.device,
            ports: res.device.and_then(|_| ports(manifest, res.domain)),
            mailboxes: ids.iter().map(|&i| MailboxId(i)).collect(),
            requested: req,
            deadline: 0,
            left: BTreeMap::new(),
            verified: false,
            freshness_checked: false,
            quote: None,
            ended: false,
            rx: Reassembler::default(),
        };
        let result = self.verify(m, &mut session, &res.mailboxes, requested_at, expected_image, nonce);
        match result {
            Ok(()) => {
                session.verified = true;
                self.note(m, EventKind::SessionVerified, format!("resource {:#04x}", req.resource));
                Ok(session)
            }
            Err(e) => {
                self.note(m, EventKind::VerifyFailed, format!("resource {:#04x}: {e}", req.resource));
                let owned = session.mailboxes.clone();
                m.act(me, |ctx| {
                    for mb in owned {
                        if ctx.status(mb).owner == Some(me) {
                            let _ = ctx.yield_mailbox(mb);
                        }
                    }
                });
                Err(e)
            }
        }
    }

    fn verify(
        &mut self,
        m: &mut Machine,
        s: &mut Session,
        expected_mailboxes: &[MailboxId],
        requested_at: Tick,
        expected_image: Digest,
        nonce: Nonce,
    ) -> Result<(), TeeError> {
        let me = self.id;
        let want: BTreeSet<MailboxId> = expected_mailboxes.iter().copied().collect();
        let got: BTreeSet<MailboxId> = s.mailboxes.iter().copied().collect();
        if want != got {
            return Err(TeeError::StatusMismatch(format!("granted {got:?}, expected {want:?}")));
        }
        // Ownership and quota, read from the status registers.
        let now = m.now();
        let req = s.requested;
        let mut deadline = Tick::MAX;
        for &mb in &s.mailboxes {
            let st = m.with_ctx(me, |ctx| ctx.status(mb));
            if st.is_dummy || st.owner != Some(me) {
                return Err(TeeError::StatusMismatch(format!("mailbox {mb} not owned")));
            }
            if !st.msgs_left.covers(req.msgs) {
                return Err(TeeError::StatusMismatch(format!("mailbox {mb} has {} msgs", st.msgs_left)));
            }
            if now + st.time_left < requested_at + req.duration as Tick {
                return Err(TeeError::StatusMismatch(format!("mailbox {mb} expires early")));
            }
            s.left.insert(mb, st.msgs_left);
            deadline = deadline.min(now + st.time_left);
        }
        s.deadline = deadline;

        // Measurement of the domain behind the resource.
        let pcr = m.hw().domain(s.domain).map(|d| d.spec.pcr_index).ok_or(TeeError::Tpm)?;
        let q = self.quote(m, nonce, [pcr].into_iter().collect())?;
        let key = m.hw().manifest().device_key;
        let check = |want| verify_quote(&q, &[(pcr, want)].into_iter().collect(), &nonce, &key);
        let restricted = s.device.is_some_and(|d| d.is_restricted());
        let verdict = if restricted {
            match check(used_pcr(&expected_image)) {
                Verdict::Reject(RejectReason::PcrMismatch) => check(boot_pcr(&expected_image)),
                v => v,
            }
        } else {
            check(boot_pcr(&expected_image))
        };
        match verdict {
            Verdict::Accept => {}
            Verdict::Reject(RejectReason::PcrMismatch) if q.value_of(pcr) == Some(used_pcr(&expected_image)) => {
                return Err(TeeError::StaleDomain);
            }
            Verdict::Reject(r) => return Err(TeeError::AttestReject(r)),
        }
        s.freshness_checked = !restricted;
        s.quote = Some(q);

        if restricted {
            let image = m.hw().manifest().domain(me).map(|d| d.image.clone()).unwrap_or_default();
            let binding = m.hw().manifest().policy.storage_bindings.iter().find(|b| b.image == image).cloned();
            let Some(b) = binding else { return Err(TeeError::Service(ErrCode::UnknownPartition)) };
            let mut p = b.partition.to_le_bytes().to_vec();
            p.extend_from_slice(program_credential(&image).as_bytes());
            s.verified = true;
            let r = self.call(m, s, Frame::new(op::AUTH, p));
            s.verified = false;
            r?;
        }
        Ok(())
    }

    /// Quote over `selection` with `nonce`, served by the TPM mediator.
    pub fn quote(&mut self, m: &mut Machine, nonce: Nonce, selection: BTreeSet<u8>) -> Result<Quote, TeeError> {
        let limit = m.now() + self.grant_timeout;
        let mut sent = false;
        let frame = protocol::tpm_quote_frame(&nonce, &selection);
        self.wait(m, limit, |ctx, _| {
            if !sent {
                sent = ctx.q_send(Endpoint::Tpm, &frame).is_ok();
                return None;
            }
            match ctx.q_recv(Endpoint::Tpm) {
                Some(Ok(f)) if f.op == op::TPM_QUOTE_RESP => Some(Quote::decode(&f.payload).ok_or(TeeError::Tpm)),
                Some(_) => Some(Err(TeeError::Tpm)),
                None => None,
            }
        })
    }

    /// Attestation report over this domain's own PCR.
    pub fn attest(&mut self, m: &mut Machine, nonce: Nonce) -> Result<Quote, TeeError> {
        let pcr = m.hw().domain(self.id).map(|d| d.spec.pcr_index).ok_or(TeeError::Tpm)?;
        self.quote(m, nonce, [pcr].into_iter().collect())
    }

    fn usable(s: &Session) -> Result<(), TeeError> {
        if s.ended {
            return Err(TeeError::Ended);
        }
        if !s.verified {
            return Err(TeeError::NotVerified);
        }
        Ok(())
    }

    /// Sends `frame` on the session's control mailbox and waits for the
    /// service's reply.
    pub fn call(&mut self, m: &mut Machine, s: &mut Session, frame: Frame) -> Result<Frame, TeeError> {
        Self::usable(s)?;
        let p = s.ports()?;
        let reserve = self.reserve;
        let limit = s.deadline;
        let mut sent = false;
        self.wait(m, limit, |ctx, meter| {
            if !sent {
                return match send(ctx, meter, s, p.ctrl_in, &frame, Some(reserve)) {
                    Ok(ok) => {
                        sent = ok;
                        None
                    }
                    Err(e) => Some(Err(e)),
                };
            }
            match recv(ctx, meter, s, p.reply) {
                Ok(Some(f)) => Some(service_result(f)),
                Ok(None) => None,
                Err(e) => Some(Err(e)),
            }
        })
    }

    fn expect_kind(s: &Session, kind: DeviceKind) -> Result<(), TeeError> {
        if s.device == Some(kind) {
            Ok(())
        } else {
            Err(TeeError::WrongKind)
        }
    }

    pub fn print(&mut self, m: &mut Machine, s: &mut Session, text: &str) -> Result<(), TeeError> {
        Self::expect_kind(s, DeviceKind::SerialOut)?;
        for chunk in text.as_bytes().chunks(PRINT_CHUNK) {
            self.call(m, s, Frame::new(op::PRINT, chunk.to_vec()))?;
        }
        Ok(())
    }

    pub fn readline(&mut self, m: &mut Machine, s: &mut Session) -> Result<String, TeeError> {
        Self::expect_kind(s, DeviceKind::SerialIn)?;
        let f = self.call(m, s, Frame::empty(op::READ_LINE))?;
        Ok(String::from_utf8_lossy(&f.payload).into_owned())
    }

    /// Sends one packet, split into as many DATA fragments as needed.
    /// Returns the number of frames used.
    pub fn net_send(&mut self, m: &mut Machine, s: &mut Session, packet: &[u8]) -> Result<usize, TeeError> {
        Self::usable(s)?;
        Self::expect_kind(s, DeviceKind::Network)?;
        let p = s.ports()?;
        let slot = m.hw().mailbox(p.ctrl_in).map(|mb| mb.config().msg_size).unwrap_or(64);
        let mut frags = fragment(packet, slot);
        let total = frags.len();
        frags.reverse();
        let reserve = self.reserve;
        let limit = s.deadline;
        self.wait(m, limit, |ctx, meter| {
            if let Some(f) = frags.last() {
                match send(ctx, meter, s, p.ctrl_in, f, Some(reserve)) {
                    Ok(true) => {
                        frags.pop();
                    }
                    Ok(false) => {}
                    Err(e) => return Some(Err(e)),
                }
            }
            frags.is_empty().then_some(Ok(()))
        })?;
        Ok(total)
    }

    /// Waits for the next inbound packet.
    pub fn net_recv(&mut self, m: &mut Machine, s: &mut Session, timeout: Tick) -> Result<Vec<u8>, TeeError> {
        Self::usable(s)?;
        Self::expect_kind(s, DeviceKind::Network)?;
        let p = s.ports()?;
        let reserve = self.reserve;
        let limit = (m.now() + timeout).min(s.deadline);
        self.wait(m, limit, |ctx, meter| {
            if let Err(e) = check_reserve(s, p.reply, reserve, ctx.now()) {
                return Some(Err(e));
            }
            match recv(ctx, meter, s, p.reply) {
                Ok(Some(f)) if f.op == op::DATA => match s.rx.push(&f.payload) {
                    Ok(Some(pkt)) => Some(Ok(pkt)),
                    Ok(None) => None,
                    Err(c) => Some(Err(TeeError::Service(c))),
                },
                Ok(Some(f)) => Some(service_result(f).and(Err(TeeError::Service(ErrCode::BadRequest)))),
                Ok(None) => None,
                Err(e) => Some(Err(e)),
            }
        })
    }

    /// Reads `count` blocks at partition-relative `block`.
    pub fn storage_read(&mut self, m: &mut Machine, s: &mut Session, block: u32, count: u16) -> Result<Vec<u8>, TeeError> {
        Self::usable(s)?;
        Self::expect_kind(s, DeviceKind::Storage)?;
        let p = s.ports()?;
        let mut payload = block.to_le_bytes().to_vec();
        payload.extend_from_slice(&count.to_le_bytes());
        let req = Frame::new(op::READ_BLOCKS, payload);
        let reserve = self.reserve;
        let limit = s.deadline;
        let mut sent = false;
        let mut ok = false;
        let mut data: Option<Vec<u8>> = None;
        let mut rx = Reassembler::default();
        self.wait(m, limit, |ctx, meter| {
            if !sent {
                return match send(ctx, meter, s, p.ctrl_in, &req, Some(reserve)) {
                    Ok(v) => {
                        sent = v;
                        None
                    }
                    Err(e) => Some(Err(e)),
                };
            }
            if data.is_none() {
                match recv(ctx, meter, s, p.bulk_out()) {
                    Ok(Some(f)) if f.op == op::DATA => match rx.push(&f.payload) {
                        Ok(d) => data = d,
                        Err(c) => return Some(Err(TeeError::Service(c))),
                    },
                    Ok(_) => {}
                    Err(e) => return Some(Err(e)),
                }
            }
            if !ok {
                match recv(ctx, meter, s, p.reply) {
                    Ok(Some(f)) => match service_result(f) {
                        Ok(_) => ok = true,
                        Err(e) => return Some(Err(e)),
                    },
                    Ok(None) => {}
                    Err(e) => return Some(Err(e)),
                }
            }
            (ok && data.is_some()).then(|| Ok(data.take().expect("checked")))
        })
    }

    /// Writes `data` (padded to whole blocks) at partition-relative `block`.
    pub fn storage_write(&mut self, m: &mut Machine, s: &mut Session, block: u32, data: &[u8]) -> Result<(), TeeError> {
        Self::usable(s)?;
        Self::expect_kind(s, DeviceKind::Storage)?;
        let p = s.ports()?;
        let count = data.len().div_ceil(crate::devices::BLOCK_SIZE).max(1) as u16;
        let mut payload = block.to_le_bytes().to_vec();
        payload.extend_from_slice(&count.to_le_bytes());
        let req = Frame::new(op::WRITE_BLOCKS, payload);
        let slot = m.hw().mailbox(p.bulk_in()).map(|mb| mb.config().msg_size).unwrap_or(64);
        let mut frags = fragment(data, slot);
        frags.reverse();
        let reserve = self.reserve;
        let limit = s.deadline;
        let mut sent = false;
        self.wait(m, limit, |ctx, meter| {
            if !sent {
                return match send(ctx, meter, s, p.ctrl_in, &req, Some(reserve)) {
                    Ok(v) => {
                        sent = v;
                        None
                    }
                    Err(e) => Some(Err(e)),
                };
            }
            if let Some(f) = frags.last() {
                match send(ctx, meter, s, p.bulk_in(), f, Some(reserve)) {
                    Ok(true) => {
                        frags.pop();
                    }
                    Ok(false) => {}
                    Err(e) => return Some(Err(e)),
                }
            }
            match recv(ctx, meter, s, p.reply) {
                Ok(Some(f)) => Some(service_result(f).map(|_| ())),
                Ok(None) => None,
                Err(e) => Some(Err(e)),
            }
        })
    }

    /// Disables the service, then yields every mailbox of the session.
    pub fn end_session(&mut self, m: &mut Machine, s: &mut Session) -> Result<(), TeeError> {
        if s.ended {
            return Err(TeeError::Ended);
        }
        s.ended = true;
        let me = self.id;
        let expired = m.now() >= s.deadline;
        if let (Some(p), false) = (s.ports, expired) {
            let limit = s.deadline;
            let mut sent = false;
            let disabled = self.wait(m, limit, |ctx, meter| {
                if !sent {
                    return match send(ctx, meter, s, p.ctrl_in, &Frame::empty(op::DISABLE), None) {
                        Ok(v) => {
                            sent = v;
                            None
                        }
                        Err(e) => Some(Err(e)),
                    };
                }
                match recv(ctx, meter, s, p.reply) {
                    Ok(Some(f)) if f.op == op::OK || f.op == op::ERROR => Some(Ok(())),
                    Ok(_) => None,
                    Err(e) => Some(Err(e)),
                }
            });
            if let Err(e) = disabled {
                self.note(m, EventKind::SessionClosed, format!("resource {:#04x}: disable failed: {e}", s.resource));
            }
        }
        let mailboxes = s.mailboxes.clone();
        let yielded = m.act(me, |ctx| {
            let mut n = 0;
            for mb in mailboxes {
                if ctx.status(mb).owner == Some(me) && ctx.yield_mailbox(mb).is_ok() {
                    n += 1;
                }
            }
            n
        });
        let how = if yielded == 0 { "after expiry" } else { "yielded" };
        self.note(m, EventKind::SessionClosed, format!("resource {:#04x} {how}", s.resource));
        Ok(())
    }

    /// Sends `bytes` over a granted channel to a peer TEE.
    pub fn ipc_send(&mut self, m: &mut Machine, s: &mut Session, bytes: &[u8]) -> Result<(), TeeError> {
        Self::usable(s)?;
        if s.resource < resource::IPC_BASE {
            return Err(TeeError::WrongKind);
        }
        let mb = *s.mailboxes.first().ok_or(TeeError::WrongKind)?;
        let frame = Frame::new(op::DATA, bytes.to_vec());
        let reserve = self.reserve;
        let limit = s.deadline;
        self.wait(m, limit, |ctx, meter| match send(ctx, meter, s, mb, &frame, Some(reserve)) {
            Ok(true) => Some(Ok(())),
            Ok(false) => None,
            Err(e) => Some(Err(e)),
        })
    }

    /// Receives from the channel whose fixed end is this domain, after
    /// checking through the status register that `peer` holds the other end.
    pub fn ipc_recv(&mut self, m: &mut Machine, peer: DomainId, timeout: Tick) -> Result<Vec<u8>, TeeError> {
        let me = self.id;
        let mb = m
            .hw()
            .manifest()
            .mailboxes
            .iter()
            .find(|mb| mb.config.fixed_end == me && mb.config.wired_delegates.contains(&peer))
            .map(|mb| mb.config.id)
            .ok_or(TeeError::WrongKind)?;
        let is_tee = m.hw().manifest().domain(peer).is_some_and(|d| d.kind == DomainKind::Tee);
        if !is_tee {
            return Err(TeeError::WrongKind);
        }
        let limit = m.now() + timeout;
        self.wait(m, limit, |ctx, _| {
            let st = ctx.status(mb);
            if st.owner != Some(peer) {
                return Some(Err(TeeError::StatusMismatch(format!("channel owner {:?}", st.owner))));
            }
            match ctx.recv(mb) {
                Ok(Ok(f)) if f.op == op::DATA => Some(Ok(f.payload)),
                Ok(_) => Some(Err(TeeError::Service(ErrCode::Malformed))),
                Err(MailboxError::QueueEmpty) => None,
                Err(e) => Some(Err(TeeError::Mailbox(e))),
            }
        })
    }
}
