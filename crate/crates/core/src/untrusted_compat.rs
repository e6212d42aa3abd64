//! Scripted stand-in for the commodity OS in the untrusted domain, and the
//! compatibility layer that turns its file and network operations into
//! resource-manager requests, mailbox frames and DMA transfers.
//!
//! The script runs strictly in order. An action that needs a device blocks
//! until the manager grants it; the ticks spent queued behind another
//! session are added to [`UntrustedOs::blocked_ticks`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::io_services::{ports, Ports};
use crate::mailbox::{DomainId, MailboxId, MsgLimit, Tick};
use crate::manifest::{program_credential, DomainKind, Endpoint, MachineManifest};
use crate::platform::{DmaDir, DomainCtx};
use crate::protocol::{fragment, op, purpose, resource, ErrCode, Frame, Reassembler, RmRequest};
use crate::resource_manager::lookup_resource;
use crate::trace::EventKind;

/// Session length the compatibility layer asks for unless told otherwise.
pub const DEFAULT_DURATION: u32 = 400;
/// Ticks a network action waits for a reply packet.
const NET_WAIT: Tick = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Action {
    /// Acquire a device and keep it until `close`.
    Open {
        resource: String,
        #[serde(default = "default_duration")]
        duration: u32,
    },
    Close { resource: String },
    /// Read blocks of the workload's own partition (partition-relative).
    Read { block: u32, count: u16 },
    Write { block: u32, count: u16, fill: u8 },
    /// `times` back-to-back one-shot reads.
    Stream { block: u32, count: u16, times: u32 },
    /// Authenticate to an arbitrary partition with the workload's credential.
    Auth { partition: u16 },
    Print { text: String },
    /// Send a packet through the DMA path and wait briefly for a reply.
    NetSend { text: String },
    Spin { ticks: Tick },
    Snoop { mailbox: u16 },
    ReadMailbox { mailbox: u16 },
    WriteMailbox { mailbox: u16, opcode: u16, text: String },
    Reset { domain: u8 },
    Peek { domain: u8, offset: usize },
    Dma { dir: DmaDir, addr: u64, len: usize },
}

fn default_duration() -> u32 {
    DEFAULT_DURATION
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Open { .. } => "open",
            Action::Close { .. } => "close",
            Action::Read { .. } => "read",
            Action::Write { .. } => "write",
            Action::Stream { .. } => "stream",
            Action::Auth { .. } => "auth",
            Action::Print { .. } => "print",
            Action::NetSend { .. } => "net_send",
            Action::Spin { .. } => "spin",
            Action::Snoop { .. } => "snoop",
            Action::ReadMailbox { .. } => "read_mailbox",
            Action::WriteMailbox { .. } => "write_mailbox",
            Action::Reset { .. } => "reset",
            Action::Peek { .. } => "peek",
            Action::Dma { .. } => "dma",
        }
    }

    /// Actions that try to reach something the workload does not own.
    pub fn is_attack(&self) -> bool {
        matches!(
            self,
            Action::Snoop { .. }
                | Action::ReadMailbox { .. }
                | Action::WriteMailbox { .. }
                | Action::Reset { .. }
                | Action::Peek { .. }
                | Action::Dma { .. }
                | Action::Auth { .. }
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Script(pub Vec<Action>);

pub fn resource_by_name(name: &str) -> Option<u8> {
    Some(match name {
        "serial-in" => resource::SERIAL_IN,
        "serial-out" => resource::SERIAL_OUT,
        "storage" => resource::STORAGE,
        "network" => resource::NETWORK,
        "glucose" => resource::GLUCOSE_SENSOR,
        "pump" => resource::INSULIN_PUMP,
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionResult {
    pub index: usize,
    pub action: String,
    /// The action achieved its effect. For hostile actions this must stay
    /// false.
    pub success: bool,
    pub detail: String,
    pub started: Tick,
    pub finished: Tick,
    /// Ticks spent queued behind another session.
    pub blocked: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Held {
    ports: Ports,
    mailboxes: Vec<MailboxId>,
    authed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct PendingReq {
    resource: u8,
    queued_at: Option<Tick>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Io {
    step: u8,
    auto_opened: bool,
    data: Option<Vec<u8>>,
    rx: Reassembler,
    got_ok: bool,
    frags: Vec<Frame>,
    started: Tick,
    blocked: Tick,
    deadline: Tick,
}

enum Poll<T> {
    Pending,
    Ready(T),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UntrustedOs {
    script: Vec<Action>,
    pc: usize,
    repeat_done: u32,
    held: BTreeMap<u8, Held>,
    req: Option<PendingReq>,
    io: Option<Io>,
    pub results: Vec<ActionResult>,
    pub blocked_ticks: Tick,
    pub bytes_read: u64,
    pub reads_done: u32,
    pub dma_interrupts: u32,
}

impl UntrustedOs {
    pub fn new(script: Script) -> Self {
        UntrustedOs {
            script: script.0,
            pc: 0,
            repeat_done: 0,
            held: BTreeMap::new(),
            req: None,
            io: None,
            results: Vec::new(),
            blocked_ticks: 0,
            bytes_read: 0,
            reads_done: 0,
            dma_interrupts: 0,
        }
    }

    /// Appends actions to the end of the script.
    pub fn enqueue(&mut self, actions: impl IntoIterator<Item = Action>) {
        self.script.extend(actions);
    }

    pub fn script_len(&self) -> usize {
        self.script.len()
    }

    pub fn finished(&self) -> bool {
        self.pc >= self.script.len()
    }

    pub fn holds(&self, resource: u8) -> bool {
        self.held.contains_key(&resource)
    }

    pub fn run(&mut self, ctx: &mut DomainCtx<'_>) {
        while ctx.q_recv(Endpoint::Tpm).is_some() {}
        let Some(action) = self.script.get(self.pc).cloned() else {
            return;
        };
        let io = self.io.get_or_insert_with(|| Io { started: ctx.now(), ..Io::default() });
        if io.step == 0 && io.deadline == 0 {
            io.deadline = Tick::MAX;
        }
        let done = self.step(ctx, &action);
        if let Some((success, detail)) = done {
            let io = self.io.take().unwrap_or_default();
            if action.is_attack() {
                let verdict = if success { "succeeded" } else { "failed" };
                ctx.emit(EventKind::Attack, None, format!("untrusted {}: {verdict} ({detail})", action.name()));
            }
            self.results.push(ActionResult {
                index: self.pc,
                action: action.name().to_string(),
                success,
                detail,
                started: io.started,
                finished: ctx.now(),
                blocked: io.blocked,
            });
            let repeat = matches!(action, Action::Stream { times, .. } if self.repeat_done + 1 < times);
            if repeat && success {
                self.repeat_done += 1;
            } else {
                self.repeat_done = 0;
                self.pc += 1;
            }
        }
    }

    /// Advances the current action by one quantum. `Some` when it is over.
    fn step(&mut self, ctx: &mut DomainCtx<'_>, action: &Action) -> Option<(bool, String)> {
        match action {
            Action::Spin { ticks } => {
                let io = self.io.as_mut().expect("io");
                if io.step == 0 {
                    io.step = 1;
                    io.deadline = ctx.now() + ticks;
                }
                (ctx.now() + 1 >= io.deadline).then(|| (true, format!("{ticks} ticks")))
            }
            Action::Open { resource: name, duration } => {
                let Some(res) = resource_by_name(name) else {
                    return Some((false, format!("unknown resource {name}")));
                };
                match self.acquire(ctx, res, *duration) {
                    Poll::Pending => None,
                    Poll::Ready(Err(e)) => Some((false, e)),
                    Poll::Ready(Ok(())) => Some((true, format!("{name} granted"))),
                }
            }
            Action::Close { resource: name } => {
                let Some(res) = resource_by_name(name) else {
                    return Some((false, format!("unknown resource {name}")));
                };
                Some((self.release(ctx, res), name.clone()))
            }
            Action::Read { block, count } | Action::Stream { block, count, .. } => {
                self.storage_io(ctx, *block, *count, None)
            }
            Action::Write { block, count, fill } => self.storage_io(ctx, *block, *count, Some(*fill)),
            Action::Auth { partition } => self.auth_probe(ctx, *partition),
            Action::Print { text } => self.print(ctx, text),
            Action::NetSend { text } => self.net_send(ctx, text),
            Action::Snoop { mailbox } => {
                let st = ctx.status(MailboxId(*mailbox));
                let leaked = !st.is_dummy;
                Some((leaked, if leaked { format!("status {:?}", st.owner) } else { "dummy status".into() }))
            }
            Action::ReadMailbox { mailbox } => Some(match ctx.mb_read(MailboxId(*mailbox)) {
                Ok(bytes) => (true, format!("read {} bytes", bytes.len())),
                Err(e) => (false, e.to_string()),
            }),
            Action::WriteMailbox { mailbox, opcode, text } => {
                let f = Frame::new(*opcode, text.as_bytes().to_vec());
                Some(match ctx.send(MailboxId(*mailbox), &f) {
                    Ok(_) => (true, "written".into()),
                    Err(e) => (false, e.to_string()),
                })
            }
            Action::Reset { domain } => Some(match ctx.reset(DomainId(*domain)) {
                Ok(()) => (true, "reset".into()),
                Err(e) => (false, e.to_string()),
            }),
            Action::Peek { domain, offset } => Some(match ctx.peek(DomainId(*domain), *offset) {
                Some(b) => (DomainId(*domain) != ctx.id(), format!("byte {b:#04x}")),
                None => (false, "denied".into()),
            }),
            Action::Dma { dir, addr, len } => {
                let net = network_domain(ctx.manifest());
                Some(match net.map(|n| ctx.dma(n, *dir, *addr, *len)) {
                    Some(Ok(n)) => {
                        self.dma_interrupts += 1;
                        (true, format!("{n} bytes"))
                    }
                    Some(Err(e)) => (false, e.to_string()),
                    None => (false, "no network".into()),
                })
            }
        }
    }

    fn acquire(&mut self, ctx: &mut DomainCtx<'_>, res: u8, duration: u32) -> Poll<Result<(), String>> {
        if self.held.contains_key(&res) {
            return Poll::Ready(Ok(()));
        }
        let rm = Endpoint::Domain(DomainId::RESOURCE_MANAGER);
        if self.req.as_ref().is_none_or(|r| r.resource != res) {
            let req = RmRequest { resource: res, msgs: MsgLimit::Infinite, duration, purpose: purpose::GENERAL };
            if ctx.q_send(rm, &req.to_frame()).is_err() {
                return Poll::Pending;
            }
            self.req = Some(PendingReq { resource: res, queued_at: None });
            return Poll::Pending;
        }
        while let Some(frame) = ctx.q_recv(rm) {
            let Ok(f) = frame else { continue };
            if f.payload.first() != Some(&res) {
                continue;
            }
            match f.op {
                op::RM_QUEUED => {
                    if let Some(r) = self.req.as_mut() {
                        r.queued_at.get_or_insert(ctx.now());
                    }
                }
                op::RM_DENIED => {
                    self.req = None;
                    return Poll::Ready(Err("denied by manager".into()));
                }
                op::RM_GRANT => {
                    let r = self.req.take().expect("request pending");
                    if let Some(q) = r.queued_at {
                        let waited = ctx.now() - q;
                        self.blocked_ticks += waited;
                        if let Some(io) = self.io.as_mut() {
                            io.blocked += waited;
                        }
                    }
                    let (_, ids) = crate::protocol::parse_grant(&f).unwrap_or_default();
                    let Some(found) = lookup_resource(ctx.manifest(), ctx.id(), res) else {
                        return Poll::Ready(Err("unknown resource".into()));
                    };
                    let Some(p) = ports(ctx.manifest(), found.domain) else {
                        return Poll::Ready(Err("resource has no service".into()));
                    };
                    let mailboxes = ids.into_iter().map(MailboxId).collect();
                    self.held.insert(res, Held { ports: p, mailboxes, authed: false });
                    return Poll::Ready(Ok(()));
                }
                _ => {}
            }
        }
        Poll::Pending
    }

    fn release(&mut self, ctx: &mut DomainCtx<'_>, res: u8) -> bool {
        let Some(h) = self.held.remove(&res) else { return false };
        for mb in h.mailboxes {
            if ctx.status(mb).owner == Some(ctx.id()) {
                let _ = ctx.yield_mailbox(mb);
            }
        }
        true
    }

    fn credential(ctx: &DomainCtx<'_>) -> Option<(u16, [u8; 32])> {
        let image = &ctx.spec().image;
        let b = ctx.manifest().policy.storage_bindings.iter().find(|b| &b.image == image)?;
        Some((b.partition, program_credential(image).0))
    }

    /// Reply frame on the held resource's reply mailbox, if any.
    fn reply(&mut self, ctx: &mut DomainCtx<'_>, res: u8) -> Option<Frame> {
        let h = self.held.get(&res)?;
        ctx.recv(h.ports.reply).ok()?.ok()
    }

    /// Acquire storage (one-shot unless already open) and authenticate.
    /// Steps 0 and 1; leaves `io.step == 2` once ready.
    fn storage_ready(&mut self, ctx: &mut DomainCtx<'_>) -> Poll<Result<(), String>> {
        let step = self.io.as_ref().expect("io").step;
        if step == 0 {
            let already = self.held.contains_key(&resource::STORAGE);
            match self.acquire(ctx, resource::STORAGE, DEFAULT_DURATION) {
                Poll::Pending => return Poll::Pending,
                Poll::Ready(Err(e)) => return Poll::Ready(Err(e)),
                Poll::Ready(Ok(())) => {}
            }
            let io = self.io.as_mut().expect("io");
            io.auto_opened = !already;
            if self.held[&resource::STORAGE].authed {
                io.step = 2;
                return Poll::Ready(Ok(()));
            }
            let Some((part, cred)) = Self::credential(ctx) else {
                return Poll::Ready(Err("no partition for this image".into()));
            };
            let mut p = part.to_le_bytes().to_vec();
            p.extend_from_slice(&cred);
            let ctrl = self.held[&resource::STORAGE].ports.ctrl_in;
            if ctx.send(ctrl, &Frame::new(op::AUTH, p)).is_ok() {
                self.io.as_mut().expect("io").step = 1;
            }
            return Poll::Pending;
        }
        if step == 1 {
            let Some(f) = self.reply(ctx, resource::STORAGE) else { return Poll::Pending };
            if f.op != op::OK {
                return Poll::Ready(Err(err_name(&f)));
            }
            self.held.get_mut(&resource::STORAGE).expect("held").authed = true;
            self.io.as_mut().expect("io").step = 2;
        }
        Poll::Ready(Ok(()))
    }

    fn finish_storage(&mut self, ctx: &mut DomainCtx<'_>, outcome: (bool, String)) -> Option<(bool, String)> {
        if self.io.as_ref().is_some_and(|io| io.auto_opened) {
            self.release(ctx, resource::STORAGE);
        }
        Some(outcome)
    }

    fn storage_io(&mut self, ctx: &mut DomainCtx<'_>, block: u32, count: u16, fill: Option<u8>) -> Option<(bool, String)> {
        match self.storage_ready(ctx) {
            Poll::Pending => return None,
            Poll::Ready(Err(e)) => return self.finish_storage(ctx, (false, e)),
            Poll::Ready(Ok(())) => {}
        }
        let h = self.held[&resource::STORAGE].clone();
        let io = self.io.as_mut().expect("io");
        match io.step {
            2 => {
                let mut p = block.to_le_bytes().to_vec();
                p.extend_from_slice(&count.to_le_bytes());
                let opcode = if fill.is_some() { op::WRITE_BLOCKS } else { op::READ_BLOCKS };
                if ctx.send(h.ports.ctrl_in, &Frame::new(opcode, p)).is_ok() {
                    io.step = 3;
                    if let Some(b) = fill {
                        let data = vec![b; count as usize * crate::devices::BLOCK_SIZE];
                        let slot = ctx.hw().mailbox(h.ports.bulk_in()).map(|m| m.config().msg_size).unwrap_or(64);
                        io.frags = fragment(&data, slot);
                        io.frags.reverse();
                    }
                }
                None
            }
            _ => {
                if let Some(f) = io.frags.last().cloned() {
                    if ctx.send(h.ports.bulk_in(), &f).is_ok() {
                        io.frags.pop();
                    }
                }
                if fill.is_none() && io.data.is_none() {
                    if let Ok(Ok(f)) = ctx.recv(h.ports.bulk_out()) {
                        if f.op == op::DATA {
                            match io.rx.push(&f.payload) {
                                Ok(Some(d)) => io.data = Some(d),
                                Ok(None) => {}
                                Err(code) => return self.finish_storage(ctx, (false, code.name().into())),
                            }
                        }
                    }
                }
                let io = self.io.as_mut().expect("io");
                if !io.got_ok {
                    if let Ok(Ok(f)) = ctx.recv(h.ports.reply) {
                        if f.op != op::OK {
                            return self.finish_storage(ctx, (false, err_name(&f)));
                        }
                        io.got_ok = true;
                    }
                }
                let io = self.io.as_mut().expect("io");
                let complete = io.got_ok && (fill.is_some() || io.data.is_some());
                if !complete {
                    return None;
                }
                let detail = match io.data.take() {
                    Some(d) => {
                        let n = d.len().min(ctx.memory().len());
                        ctx.memory_mut()[..n].copy_from_slice(&d[..n]);
                        self.bytes_read += d.len() as u64;
                        self.reads_done += 1;
                        format!("read {} bytes", d.len())
                    }
                    None => format!("wrote {count} blocks"),
                };
                self.finish_storage(ctx, (true, detail))
            }
        }
    }

    fn auth_probe(&mut self, ctx: &mut DomainCtx<'_>, partition: u16) -> Option<(bool, String)> {
        let io = self.io.as_mut().expect("io");
        if io.step == 0 {
            let already = self.held.contains_key(&resource::STORAGE);
            match self.acquire(ctx, resource::STORAGE, DEFAULT_DURATION) {
                Poll::Pending => return None,
                Poll::Ready(Err(e)) => return Some((false, e)),
                Poll::Ready(Ok(())) => {}
            }
            let cred = program_credential(&ctx.spec().image).0;
            let mut p = partition.to_le_bytes().to_vec();
            p.extend_from_slice(&cred);
            let ctrl = self.held[&resource::STORAGE].ports.ctrl_in;
            let io = self.io.as_mut().expect("io");
            io.auto_opened = !already;
            if ctx.send(ctrl, &Frame::new(op::AUTH, p)).is_ok() {
                io.step = 1;
            }
            return None;
        }
        let f = self.reply(ctx, resource::STORAGE)?;
        let outcome = if f.op == op::OK {
            self.held.get_mut(&resource::STORAGE).expect("held").authed = true;
            (true, format!("authenticated to partition {partition}"))
        } else {
            (false, err_name(&f))
        };
        self.finish_storage(ctx, outcome)
    }

    fn print(&mut self, ctx: &mut DomainCtx<'_>, text: &str) -> Option<(bool, String)> {
        let res = resource::SERIAL_OUT;
        let step = self.io.as_ref().expect("io").step;
        match step {
            0 => {
                match self.acquire(ctx, res, DEFAULT_DURATION) {
                    Poll::Pending => return None,
                    Poll::Ready(Err(e)) => return Some((false, e)),
                    Poll::Ready(Ok(())) => {}
                }
                let ctrl = self.held[&res].ports.ctrl_in;
                if ctx.send(ctrl, &Frame::new(op::PRINT, text.as_bytes().to_vec())).is_ok() {
                    self.io.as_mut().expect("io").step = 1;
                }
                None
            }
            _ => {
                let f = self.reply(ctx, res)?;
                self.release(ctx, res);
                Some(if f.op == op::OK { (true, "printed".into()) } else { (false, err_name(&f)) })
            }
        }
    }

    fn net_send(&mut self, ctx: &mut DomainCtx<'_>, text: &str) -> Option<(bool, String)> {
        let res = resource::NETWORK;
        let Some(net) = network_domain(ctx.manifest()) else {
            return Some((false, "no network".into()));
        };
        let Some(window) = ctx.manifest().arbiters.iter().find(|a| a.io_domain == net).map(|a| a.dma_window) else {
            return Some((false, "no arbiter".into()));
        };
        let base = ctx.spec().mem_base;
        let step = self.io.as_ref().expect("io").step;
        match step {
            0 => {
                match self.acquire(ctx, res, DEFAULT_DURATION) {
                    Poll::Pending => return None,
                    Poll::Ready(Err(e)) => return Some((false, e)),
                    Poll::Ready(Ok(())) => {}
                }
                let off = (window.start - base) as usize;
                let bytes = text.as_bytes();
                ctx.memory_mut()[off..off + bytes.len()].copy_from_slice(bytes);
                match ctx.dma(net, DmaDir::ToDevice, window.start, bytes.len()) {
                    Ok(_) => {
                        self.dma_interrupts += 1;
                        let io = self.io.as_mut().expect("io");
                        io.step = 1;
                        io.deadline = ctx.now() + NET_WAIT;
                        None
                    }
                    Err(e) => {
                        self.release(ctx, res);
                        Some((false, e.to_string()))
                    }
                }
            }
            _ => {
                let half = window.len / 2;
                match ctx.dma(net, DmaDir::FromDevice, window.start + half, half as usize) {
                    Ok(n) if n > 0 => {
                        self.dma_interrupts += 1;
                        self.release(ctx, res);
                        Some((true, format!("sent {} bytes, received {n}", text.len())))
                    }
                    Ok(_) if ctx.now() < self.io.as_ref().expect("io").deadline => None,
                    Ok(_) => {
                        self.release(ctx, res);
                        Some((true, format!("sent {} bytes, no reply", text.len())))
                    }
                    Err(e) => {
                        self.release(ctx, res);
                        Some((false, e.to_string()))
                    }
                }
            }
        }
    }
}

fn err_name(f: &Frame) -> String {
    f.error_code().map(ErrCode::name).unwrap_or("unexpected reply").to_string()
}

fn network_domain(m: &MachineManifest) -> Option<DomainId> {
    m.domain_of_kind(DomainKind::Io(crate::manifest::DeviceKind::Network))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_json_round_trip() {
        let json = r#"[
            {"op": "open", "resource": "storage"},
            {"op": "read", "block": 0, "count": 2},
            {"op": "stream", "block": 0, "count": 1, "times": 3},
            {"op": "spin", "ticks": 5},
            {"op": "snoop", "mailbox": 2},
            {"op": "dma", "dir": "to_device", "addr": 2147549184, "len": 4},
            {"op": "close", "resource": "storage"}
        ]"#;
        let s: Script = serde_json::from_str(json).unwrap();
        assert_eq!(s.0.len(), 7);
        assert_eq!(s.0[0], Action::Open { resource: "storage".into(), duration: DEFAULT_DURATION });
        let back: Script = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn attack_classification() {
        assert!(Action::Snoop { mailbox: 0 }.is_attack());
        assert!(!Action::Read { block: 0, count: 1 }.is_attack());
        assert_eq!(resource_by_name("pump"), Some(resource::INSULIN_PUMP));
        assert_eq!(resource_by_name("gpu"), None);
    }
}
