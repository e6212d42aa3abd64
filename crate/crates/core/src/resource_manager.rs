//! Resource manager program: staged boot of the remaining domains, FIFO
//! admission of access requests, restricted-storage setup and the default
//! shell on the serial console.
//!
//! The manager is untrusted for confidentiality and integrity. Everything
//! it does goes through the same mailbox and reset hardware as any other
//! domain, so a misbehaving manager can only delay or deny service.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::io_services::{ports, Ports};
use crate::mailbox::{DomainId, MailboxId, MsgLimit, Quota, Tick};
use crate::manifest::{DeviceKind, DomainKind, Endpoint, MachineManifest, StorageBinding};
use crate::platform::{BootStatus, DomainCtx, ResetError, RunState};
use crate::protocol::{self, op, resource, ErrCode, Frame, RmRequest};
use crate::trace::EventKind;

/// Lifetime of the storage data-plane delegation used to stage one image.
pub const BOOT_WINDOW: Tick = 1000;
pub const PROMPT: &str = "rm> ";
/// Default frame written by a manager injecting a pre-session message.
pub const PREINJECT_FRAME: &[u8] = b"\x06\x00\x04\x00evil";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Resource {
    pub id: u8,
    /// I/O domain behind the resource; the peer TEE for IPC channels.
    pub domain: DomainId,
    pub device: Option<DeviceKind>,
    pub mailboxes: Vec<MailboxId>,
}

impl Resource {
    pub fn restricted(&self) -> bool {
        self.device.is_some_and(|d| d.is_restricted())
    }

    /// Non-restricted devices are reset before every grant and after use.
    pub fn resettable(&self) -> bool {
        self.device.is_some() && !self.restricted()
    }
}

pub fn device_resource(dev: DeviceKind) -> u8 {
    match dev {
        DeviceKind::SerialIn => resource::SERIAL_IN,
        DeviceKind::SerialOut => resource::SERIAL_OUT,
        DeviceKind::Storage => resource::STORAGE,
        DeviceKind::Network => resource::NETWORK,
        DeviceKind::GlucoseSensor => resource::GLUCOSE_SENSOR,
        DeviceKind::InsulinPump => resource::INSULIN_PUMP,
    }
}

/// Resolves a resource id as seen by `requester`.
pub fn lookup_resource(manifest: &MachineManifest, requester: DomainId, id: u8) -> Option<Resource> {
    if id >= resource::IPC_BASE {
        let peer = DomainId(id - resource::IPC_BASE);
        if manifest.domain(peer)?.kind != DomainKind::Tee || peer == requester {
            return None;
        }
        let mb = manifest.mailboxes.iter().find(|m| {
            m.config.fixed_end == peer && m.config.wired_delegates.contains(&requester)
        })?;
        return Some(Resource { id, domain: peer, device: None, mailboxes: vec![mb.config.id] });
    }
    let (domain, device) = manifest.domains.iter().find_map(|d| match d.kind {
        DomainKind::Io(dev) if device_resource(dev) == id => Some((d.id, dev)),
        _ => None,
    })?;
    let mailboxes: Vec<MailboxId> = manifest
        .mailboxes
        .iter()
        .filter(|m| m.config.fixed_end == domain && m.config.wired_delegates.contains(&requester))
        .map(|m| m.config.id)
        .collect();
    if mailboxes.is_empty() {
        return None;
    }
    Some(Resource { id, domain, device: Some(device), mailboxes })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingRequest {
    pub requester: DomainId,
    pub request: RmRequest,
    pub received: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Stage {
    Reset,
    Allocate { sent: bool },
    Bind { sent: bool },
    Delegate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Job {
    pending: PendingRequest,
    resource: Resource,
    binding: Option<StorageBinding>,
    stage: Stage,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub requester: DomainId,
    pub resource: Resource,
    pub granted_at: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum BootStep {
    Reset,
    AwaitStaged,
    AwaitYield { deadline: Tick },
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct BootPlan {
    targets: VecDeque<DomainId>,
    step: BootStep,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Shell {
    had_ui: bool,
    awaiting_line: bool,
    print_inflight: bool,
    prints: VecDeque<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResourceManager {
    boot: Option<BootPlan>,
    storage: Ports,
    serial_in: Option<Ports>,
    serial_out: Option<Ports>,
    queue: VecDeque<PendingRequest>,
    jobs: BTreeMap<u8, Job>,
    pub sessions: Vec<Session>,
    outbox: VecDeque<(DomainId, Frame)>,
    allocated: BTreeSet<u16>,
    shell: Shell,
    halted: bool,
}

impl ResourceManager {
    /// A manager that starts by staging every domain not yet running.
    pub fn new(manifest: &MachineManifest, running: &BTreeSet<DomainId>) -> Self {
        let storage_dom = manifest.device_domain(DeviceKind::Storage).expect("validated manifest");
        let targets: VecDeque<DomainId> = manifest
            .domains
            .iter()
            .map(|d| d.id)
            .filter(|id| !id.is_rm() && !running.contains(id))
            .collect();
        let boot = Some(BootPlan { targets, step: BootStep::Reset });
        ResourceManager {
            boot,
            storage: ports(manifest, storage_dom).expect("storage has mailboxes"),
            serial_in: manifest.device_domain(DeviceKind::SerialIn).and_then(|d| ports(manifest, d)),
            serial_out: manifest.device_domain(DeviceKind::SerialOut).and_then(|d| ports(manifest, d)),
            queue: VecDeque::new(),
            jobs: BTreeMap::new(),
            sessions: Vec::new(),
            outbox: VecDeque::new(),
            allocated: BTreeSet::new(),
            shell: Shell::default(),
            halted: false,
        }
    }

    pub fn is_booting(&self) -> bool {
        self.boot.is_some()
    }

    pub fn queued(&self) -> impl Iterator<Item = &PendingRequest> {
        self.queue.iter()
    }

    pub fn run(&mut self, ctx: &mut DomainCtx<'_>) {
        while ctx.q_recv(Endpoint::Tpm).is_some() {}
        if self.halted {
            return;
        }
        if self.boot.is_some() {
            self.boot_step(ctx);
            return;
        }
        self.flush_outbox(ctx);
        self.poll_sessions(ctx);
        self.advance_jobs(ctx);
        self.read_requests(ctx);
        self.start_jobs(ctx);
        self.shell_step(ctx);
    }

    fn boot_step(&mut self, ctx: &mut DomainCtx<'_>) {
        let plan = self.boot.as_mut().expect("booting");
        let Some(&target) = plan.targets.front() else {
            self.boot = None;
            ctx.set_boot_status(BootStatus::Complete);
            ctx.emit(EventKind::BootComplete, None, "");
            return;
        };
        let name = ctx.hw().domain(target).map(|d| d.spec.image.clone()).unwrap_or_default();
        let data_out = self.storage.bulk_out();
        match plan.step {
            BootStep::Reset => {
                if ctx.reset(target).is_err() {
                    return;
                }
                ctx.emit_about(target, EventKind::BootStart, None, name.clone());
                let quota = Quota { msgs: MsgLimit::Infinite, deadline: ctx.now() + BOOT_WINDOW };
                if ctx.delegate(data_out, target, quota).is_err() {
                    return self.abort_boot(ctx, &name);
                }
                let _ = ctx.send(self.storage.ctrl_in, &Frame::new(op::STAGE, name.as_bytes().to_vec()));
                plan.step = BootStep::AwaitStaged;
            }
            BootStep::AwaitStaged => match ctx.recv(self.storage.reply) {
                Ok(Ok(f)) if f.op == op::OK => {
                    plan.step = BootStep::AwaitYield { deadline: ctx.now() + BOOT_WINDOW };
                }
                Ok(_) => self.abort_boot(ctx, &name),
                Err(_) => {}
            },
            BootStep::AwaitYield { deadline } => {
                let st = ctx.status(data_out);
                if !st.is_dummy && st.owner == Some(DomainId::RESOURCE_MANAGER) {
                    if ctx.run_state(target) == Some(RunState::Running) {
                        plan.targets.pop_front();
                        plan.step = BootStep::Reset;
                    } else {
                        self.abort_boot(ctx, &name);
                    }
                } else if ctx.now() > deadline {
                    self.abort_boot(ctx, &name);
                }
            }
        }
    }

    fn abort_boot(&mut self, ctx: &mut DomainCtx<'_>, name: &str) {
        ctx.emit(EventKind::BootAborted, None, name.to_string());
        ctx.set_boot_status(BootStatus::Aborted(name.to_string()));
        self.boot = None;
        self.halted = true;
    }

    fn flush_outbox(&mut self, ctx: &mut DomainCtx<'_>) {
        while let Some((to, frame)) = self.outbox.front() {
            if ctx.q_send(Endpoint::Domain(*to), frame).is_err() {
                break;
            }
            self.outbox.pop_front();
        }
    }

    fn reply(&mut self, ctx: &mut DomainCtx<'_>, to: DomainId, frame: Frame) {
        self.outbox.push_back((to, frame));
        self.flush_outbox(ctx);
    }

    fn deny(&mut self, ctx: &mut DomainCtx<'_>, p: &PendingRequest, why: &str) {
        ctx.emit(EventKind::PolicyDenied, None, format!("{} resource {:#04x}: {why}", p.requester, p.request.resource));
        let code = (ErrCode::Forbidden as u16).to_le_bytes();
        let mut payload = vec![p.request.resource];
        payload.extend_from_slice(&code);
        self.reply(ctx, p.requester, Frame::new(op::RM_DENIED, payload));
    }

    fn busy(&self, id: u8) -> bool {
        self.jobs.contains_key(&id) || self.sessions.iter().any(|s| s.resource.id == id)
    }

    fn read_requests(&mut self, ctx: &mut DomainCtx<'_>) {
        let peers: Vec<DomainId> = ctx
            .queue_peers()
            .into_iter()
            .filter_map(|e| match e {
                Endpoint::Domain(d) => Some(d),
                Endpoint::Tpm => None,
            })
            .collect();
        for peer in peers {
            let Some(frame) = ctx.q_recv(Endpoint::Domain(peer)) else { continue };
            let Some(req) = frame.ok().as_ref().and_then(RmRequest::from_frame) else {
                ctx.emit(EventKind::ServiceError, None, format!("bad request from {peer}"));
                continue;
            };
            let pending = PendingRequest { requester: peer, request: req, received: ctx.now() };
            ctx.emit(
                EventKind::RequestReceived,
                None,
                format!("{peer} resource {:#04x} msgs={} duration={}", req.resource, req.msgs, req.duration),
            );
            self.admit(ctx, pending);
        }
    }

    fn check_policy(&self, ctx: &DomainCtx<'_>, p: &PendingRequest) -> Result<(Resource, Option<StorageBinding>), String> {
        let manifest = ctx.manifest();
        let policy = &manifest.policy;
        if p.request.duration == 0 || p.request.duration as u64 > policy.max_time {
            return Err(format!("duration {} outside 1..={}", p.request.duration, policy.max_time));
        }
        if let MsgLimit::Finite(n) = p.request.msgs {
            if n == 0 || n > policy.max_msgs {
                return Err(format!("msgs {n} outside 1..={}", policy.max_msgs));
            }
        }
        let res = lookup_resource(manifest, p.requester, p.request.resource)
            .ok_or_else(|| "unknown resource".to_string())?;
        let binding = if res.restricted() {
            let image = &manifest.domain(p.requester).ok_or("unknown requester")?.image;
            let b = policy.storage_bindings.iter().find(|b| &b.image == image).cloned();
            Some(b.ok_or_else(|| format!("no storage binding for {image}"))?)
        } else {
            None
        };
        Ok((res, binding))
    }

    fn admit(&mut self, ctx: &mut DomainCtx<'_>, p: PendingRequest) {
        let id = p.request.resource;
        let waiting = self.queue.iter().any(|q| q.request.resource == id);
        if let Err(why) = self.check_policy(ctx, &p) {
            return self.deny(ctx, &p, &why);
        }
        if self.busy(id) || waiting {
            ctx.emit(EventKind::RequestQueued, None, format!("{} resource {id:#04x}", p.requester));
            let mut payload = vec![id];
            payload.extend_from_slice(&(self.queue.len() as u16 + 1).to_le_bytes());
            let requester = p.requester;
            self.queue.push_back(p);
            self.reply(ctx, requester, Frame::new(op::RM_QUEUED, payload));
        } else {
            self.start_job(ctx, p);
        }
    }

    fn start_job(&mut self, ctx: &mut DomainCtx<'_>, p: PendingRequest) {
        let (resource, binding) = match self.check_policy(ctx, &p) {
            Ok(v) => v,
            Err(why) => return self.deny(ctx, &p, &why),
        };
        let stage = if let Some(b) = &binding {
            if self.allocated.contains(&b.partition) {
                Stage::Bind { sent: false }
            } else {
                Stage::Allocate { sent: false }
            }
        } else if resource.resettable() {
            Stage::Reset
        } else {
            Stage::Delegate
        };
        let id = resource.id;
        self.jobs.insert(id, Job { pending: p, resource, binding, stage });
        self.advance_job(ctx, id);
    }

    fn start_jobs(&mut self, ctx: &mut DomainCtx<'_>) {
        let mut i = 0;
        let mut seen = BTreeSet::new();
        while i < self.queue.len() {
            let id = self.queue[i].request.resource;
            if seen.insert(id) && !self.busy(id) {
                let p = self.queue.remove(i).expect("index in range");
                self.start_job(ctx, p);
            } else {
                i += 1;
            }
        }
    }

    fn advance_jobs(&mut self, ctx: &mut DomainCtx<'_>) {
        let ids: Vec<u8> = self.jobs.keys().copied().collect();
        for id in ids {
            self.advance_job(ctx, id);
        }
    }

    fn storage_reply(&self, ctx: &mut DomainCtx<'_>) -> Option<Result<(), ErrCode>> {
        match ctx.recv(self.storage.reply) {
            Ok(Ok(f)) if f.op == op::OK => Some(Ok(())),
            Ok(Ok(f)) => Some(Err(f.error_code().unwrap_or(ErrCode::BadRequest))),
            Ok(Err(_)) => Some(Err(ErrCode::Malformed)),
            Err(_) => None,
        }
    }

    fn advance_job(&mut self, ctx: &mut DomainCtx<'_>, id: u8) {
        let Some(mut job) = self.jobs.remove(&id) else { return };
        let keep = match job.stage.clone() {
            Stage::Reset => {
                let injected = ctx.faults().rm_preinject.clone();
                let skip = ctx.faults().rm_skip_reset;
                let reset = if skip { Ok(()) } else { ctx.reset(job.resource.domain) };
                match reset {
                    Ok(()) => {
                        if let Some(bytes) = injected {
                            self.preinject(ctx, &job.resource, &bytes);
                        }
                        job.stage = Stage::Delegate;
                        true
                    }
                    Err(ResetError::Blocked(_)) => true,
                    Err(e) => {
                        self.deny(ctx, &job.pending, &e.to_string());
                        false
                    }
                }
            }
            Stage::Allocate { sent: false } => {
                let b = job.binding.as_ref().expect("storage job has a binding");
                let mut p = b.partition.to_le_bytes().to_vec();
                protocol::put_u32(&mut p, b.first_block);
                protocol::put_u32(&mut p, b.last_block);
                p.extend_from_slice(b.credential.as_bytes());
                let _ = ctx.send(self.storage.ctrl_in, &Frame::new(op::ALLOCATE, p));
                job.stage = Stage::Allocate { sent: true };
                true
            }
            Stage::Allocate { sent: true } => match self.storage_reply(ctx) {
                Some(Ok(())) => {
                    let part = job.binding.as_ref().expect("binding").partition;
                    self.allocated.insert(part);
                    job.stage = Stage::Bind { sent: false };
                    true
                }
                Some(Err(code)) => {
                    self.deny(ctx, &job.pending, code.name());
                    false
                }
                None => true,
            },
            Stage::Bind { sent: false } => {
                let part = job.binding.as_ref().expect("binding").partition;
                let _ = ctx.send(self.storage.ctrl_in, &Frame::new(op::BIND, part.to_le_bytes().to_vec()));
                job.stage = Stage::Bind { sent: true };
                true
            }
            Stage::Bind { sent: true } => match self.storage_reply(ctx) {
                Some(Ok(())) => {
                    job.stage = Stage::Delegate;
                    true
                }
                Some(Err(code)) => {
                    self.deny(ctx, &job.pending, code.name());
                    false
                }
                None => true,
            },
            Stage::Delegate => {
                self.delegate(ctx, &job);
                false
            }
        };
        if keep {
            self.jobs.insert(id, job);
        }
    }

    fn preinject(&mut self, ctx: &mut DomainCtx<'_>, res: &Resource, bytes: &[u8]) {
        let bytes = if bytes.is_empty() { PREINJECT_FRAME } else { bytes };
        if let Some(p) = ports(ctx.manifest(), res.domain) {
            if ctx.mb_write(p.ctrl_in, bytes).is_ok() {
                ctx.emit(EventKind::Attack, Some(p.ctrl_in), "manager pre-injects a frame");
            }
        }
    }

    fn delegate(&mut self, ctx: &mut DomainCtx<'_>, job: &Job) {
        let req = job.pending.request;
        let msgs = if ctx.faults().rm_shortchange {
            match req.msgs {
                MsgLimit::Finite(n) => MsgLimit::Finite((n / 2).max(1)),
                MsgLimit::Infinite => MsgLimit::Finite(16),
            }
        } else {
            req.msgs
        };
        let quota = Quota { msgs, deadline: ctx.now() + req.duration as Tick };
        let requester = job.pending.requester;
        for &mb in &job.resource.mailboxes {
            if ctx.delegate(mb, requester, quota).is_err() {
                // Mailboxes already handed out stay with the requester until
                // their quota runs out; the manager cannot take them back.
                self.deny(ctx, &job.pending, "delegation refused");
                self.sessions.push(Session { requester, resource: job.resource.clone(), granted_at: ctx.now() });
                return;
            }
        }
        let ids: Vec<u16> = job.resource.mailboxes.iter().map(|m| m.0).collect();
        ctx.emit(
            EventKind::Granted,
            None,
            format!("{requester} resource {:#04x} mailboxes {ids:?} msgs={msgs} deadline={}", req.resource, quota.deadline),
        );
        self.sessions.push(Session { requester, resource: job.resource.clone(), granted_at: ctx.now() });
        self.reply(ctx, requester, protocol::grant_frame(req.resource, &ids));
    }

    fn poll_sessions(&mut self, ctx: &mut DomainCtx<'_>) {
        let mut i = 0;
        while i < self.sessions.len() {
            let s = &self.sessions[i];
            let ended = s.resource.mailboxes.iter().all(|&mb| {
                let st = ctx.status(mb);
                !st.is_dummy && st.owner == Some(DomainId::RESOURCE_MANAGER)
            });
            if !ended {
                i += 1;
                continue;
            }
            let s = self.sessions.remove(i);
            ctx.emit(
                EventKind::SessionEnded,
                None,
                format!("{} resource {:#04x} granted at {}", s.requester, s.resource.id, s.granted_at),
            );
            if s.resource.resettable() && !ctx.faults().rm_skip_reset {
                let _ = ctx.reset(s.resource.domain);
            }
        }
    }

    fn drop_requests_of(&mut self, ctx: &mut DomainCtx<'_>, who: DomainId) {
        let before = self.queue.len();
        self.queue.retain(|p| p.requester != who);
        let dropped = before - self.queue.len();
        if dropped > 0 {
            ctx.emit(EventKind::RequestDropped, None, format!("{dropped} from {who}"));
        }
        self.outbox.retain(|(to, _)| *to != who);
    }

    fn ui_available(&self, ctx: &DomainCtx<'_>) -> bool {
        let (Some(si), Some(so)) = (self.serial_in, self.serial_out) else { return false };
        let busy = [resource::SERIAL_IN, resource::SERIAL_OUT].iter().any(|&r| self.busy(r));
        !busy
            && [si.ctrl_in, si.reply, so.ctrl_in, so.reply].iter().all(|&mb| {
                let st = ctx.status(mb);
                !st.is_dummy && st.owner == Some(DomainId::RESOURCE_MANAGER) && st.time_left == 0
            })
    }

    fn print(&mut self, text: impl Into<String>) {
        self.shell.prints.push_back(text.into());
    }

    fn shell_step(&mut self, ctx: &mut DomainCtx<'_>) {
        if !self.ui_available(ctx) {
            if self.shell.had_ui {
                self.shell = Shell::default();
            }
            return;
        }
        let (si, so) = (self.serial_in.expect("ui"), self.serial_out.expect("ui"));
        if !self.shell.had_ui {
            self.shell.had_ui = true;
            self.print(PROMPT);
            ctx.emit(EventKind::ShellPrompt, None, "");
        }
        while let Ok(Ok(f)) = ctx.recv(so.reply) {
            if f.op == op::OK || f.op == op::ERROR {
                self.shell.print_inflight = false;
            }
        }
        if !self.shell.print_inflight {
            if let Some(text) = self.shell.prints.pop_front() {
                if ctx.send(so.ctrl_in, &Frame::new(op::PRINT, text.into_bytes())).is_ok() {
                    self.shell.print_inflight = true;
                }
            }
        }
        if let Ok(Ok(f)) = ctx.recv(si.reply) {
            if f.op == op::LINE {
                self.shell.awaiting_line = false;
                let line = String::from_utf8_lossy(&f.payload).into_owned();
                self.command(ctx, line.trim());
            }
        }
        if !self.shell.awaiting_line && ctx.send(si.ctrl_in, &Frame::empty(op::READ_LINE)).is_ok() {
            self.shell.awaiting_line = true;
        }
    }

    fn command(&mut self, ctx: &mut DomainCtx<'_>, line: &str) {
        ctx.emit(EventKind::ShellCommand, None, line.to_string());
        self.print(format!("{line}\n"));
        let mut words = line.split_whitespace();
        match (words.next(), words.next()) {
            (None, _) => {}
            (Some("help"), _) => self.print("commands: help, run <program>, status\n"),
            (Some("status"), _) => {
                self.print(format!("sessions {} queued {}\n", self.sessions.len(), self.queue.len()));
            }
            (Some("run"), Some(prog)) => self.launch(ctx, prog),
            _ => self.print(format!("unknown command: {line}\n")),
        }
        self.print(PROMPT);
        ctx.emit(EventKind::ShellPrompt, None, "");
    }

    fn launch(&mut self, ctx: &mut DomainCtx<'_>, prog: &str) {
        let image = match prog {
            "banking" => "bankapp",
            "insulin" => "pumpapp",
            other => other,
        };
        let target = ctx
            .manifest()
            .domains
            .iter()
            .find(|d| d.kind == DomainKind::Tee && d.image == image)
            .map(|d| d.id);
        let Some(target) = target else {
            return self.print(format!("no such program: {prog}\n"));
        };
        match ctx.reset(target) {
            Ok(()) => {
                self.drop_requests_of(ctx, target);
                ctx.record_launch(image);
                self.print(format!("started {image} in {target}\n"));
            }
            Err(e) => self.print(format!("cannot start {image}: {e}\n")),
        }
    }
}
