//! The emulated machine: domains, mailboxes, permanent queues, the TPM, the
//! network arbiter and the deterministic tick loop.
//!
//! One tick at `now`:
//! 1. time-limit expiry on every mailbox,
//! 2. arbiter route bookkeeping,
//! 3. one quantum per domain in ascending id order,
//! 4. the TPM mediator serves queued requests by (arrival, domain id),
//! 5. `now += 1`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::{self, BootImage, Digest, PcrBank, TpmRequest, TpmResponse, MAX_PCRS};
use crate::devices::{Device, NetLink, Pump, StorageDrive};
use crate::firmware::Firmware;
use crate::mailbox::{
    DomainId, MailboxError, MailboxId, MailboxState, MailboxStatus, Metering, Mutant, Quota, Tick,
};
use crate::manifest::{DeviceKind, DomainKind, DomainSpec, Endpoint, MachineManifest, Plane, QueueSpec};
use crate::peers::Responder;
use crate::protocol::{self, op, Frame};
use crate::trace::{EventKind, TraceEvent};
use crate::untrusted_compat::Script;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlatformError {
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("unknown domain {0}")]
    UnknownDomain(DomainId),
    #[error("unknown mailbox {0}")]
    UnknownMailbox(MailboxId),
    #[error("domain {0} has no arbiter")]
    NoArbiter(DomainId),
    #[error("boot aborted: image {0:?} missing")]
    BootAborted(String),
    #[error("boot did not finish within {0} ticks")]
    BootTimeout(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ResetError {
    #[error("only the resource manager may reset a domain")]
    NotResourceManager,
    #[error("unknown domain {0}")]
    UnknownDomain(DomainId),
    #[error("the resource manager cannot reset itself")]
    SelfReset,
    #[error("reset blocked by live session on mailbox {0}")]
    Blocked(MailboxId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("no permanent queue to that endpoint")]
    NoQueue,
    #[error("queue full")]
    Full,
    #[error("message larger than queue slot")]
    TooLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DmaError {
    #[error("only the untrusted domain may program DMA")]
    NotUntrusted,
    #[error("no arbiter for that device")]
    NoArbiter,
    #[error("arbiter routes the device to its mailbox")]
    RouteDisabled,
    #[error("transfer leaves the DMA window")]
    WindowViolation,
    #[error("network link is down")]
    LinkDown,
    #[error("packet larger than the transfer buffer")]
    BufferTooSmall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// Device traffic flows through the mailbox to the I/O domain.
    Fifo,
    /// The untrusted domain drives the device by DMA.
    Dma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmaDir {
    /// Untrusted memory to the link.
    ToDevice,
    /// Next inbound packet into untrusted memory.
    FromDevice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    HeldInReset,
    /// Bootloader waiting for an image to be streamed in.
    Booting,
    Running,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainState {
    pub spec: DomainSpec,
    pub memory: Vec<u8>,
    pub run: RunState,
    pub installed: Option<BootImage>,
    pub boots: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootStatus {
    NotStarted,
    InProgress,
    Complete,
    Aborted(String),
}

/// Misbehaviour switched on from the command line or a scenario.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Faults {
    /// RM writes this frame into a device right after resetting it for a
    /// grant; empty means a default frame.
    #[serde(default)]
    pub rm_preinject: Option<Vec<u8>>,
    /// RM grants fewer messages than requested.
    #[serde(default)]
    pub rm_shortchange: bool,
    /// RM skips the device reset before a grant.
    #[serde(default)]
    pub rm_skip_reset: bool,
    /// Image whose bytes on the drive are altered after formatting.
    #[serde(default)]
    pub tamper_image: Option<String>,
    /// Image removed from the drive.
    #[serde(default)]
    pub missing_image: Option<String>,
    #[serde(default)]
    pub link_down: bool,
}

impl Faults {
    /// Parses `name` or `name:arg`.
    pub fn apply(&mut self, spec: &str) -> Result<(), String> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a.to_string())),
            None => (spec, None),
        };
        match (name, arg) {
            ("rm-preinject", None) => self.rm_preinject = Some(Vec::new()),
            ("rm-preinject", Some(a)) => {
                self.rm_preinject = Some(hex::decode(&a).map_err(|e| format!("rm-preinject: {e}"))?)
            }
            ("rm-shortchange", None) => self.rm_shortchange = true,
            ("rm-skip-reset", None) => self.rm_skip_reset = true,
            ("link-down", None) => self.link_down = true,
            ("tamper-image", Some(a)) => self.tamper_image = Some(a),
            ("missing-image", Some(a)) => self.missing_image = Some(a),
            _ => return Err(format!("unknown fault {spec:?}")),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueueState {
    pub spec: QueueSpec,
    /// Messages travelling from `endpoints[0]` to `endpoints[1]`.
    fwd: VecDeque<(Tick, Vec<u8>)>,
    back: VecDeque<(Tick, Vec<u8>)>,
}

impl QueueState {
    fn lane(&mut self, from: Endpoint) -> &mut VecDeque<(Tick, Vec<u8>)> {
        if self.spec.endpoints[0] == from {
            &mut self.fwd
        } else {
            &mut self.back
        }
    }

    fn connects(&self, a: Endpoint, b: Endpoint) -> bool {
        let [x, y] = self.spec.endpoints;
        (x == a && y == b) || (x == b && y == a)
    }

    fn peer_of(&self, e: Endpoint) -> Option<Endpoint> {
        let [x, y] = self.spec.endpoints;
        if x == e {
            Some(y)
        } else if y == e {
            Some(x)
        } else {
            None
        }
    }

    fn wipe_towards(&mut self, to: Endpoint) {
        let [x, _] = self.spec.endpoints;
        if x == to {
            self.back.clear();
        } else {
            self.fwd.clear();
        }
    }

    pub fn pending(&self) -> usize {
        self.fwd.len() + self.back.len()
    }
}

/// Reset guard: the mailbox that blocks a reset of `target`, if any. A
/// reset is refused while a session is live on a mailbox whose delegatable
/// end or fixed end is the target.
pub fn reset_guard<'a>(
    mailboxes: impl IntoIterator<Item = &'a MailboxState>,
    target: DomainId,
    now: Tick,
) -> Option<MailboxId> {
    mailboxes
        .into_iter()
        .filter(|mb| mb.mutant() != Some(Mutant::ResetGuardIgnored))
        .find(|mb| mb.session_active(now) && (mb.owner() == target || mb.config().fixed_end == target))
        .map(|mb| mb.id())
}

/// Arbiter routing: DMA iff the untrusted domain holds the data-plane
/// mailbox of the device.
pub fn route_for(data_mailbox: &MailboxState, untrusted: DomainId, now: Tick) -> Route {
    if data_mailbox.mutant() == Some(Mutant::ArbiterStuckDma) {
        return Route::Dma;
    }
    if data_mailbox.session_active(now) && data_mailbox.owner() == untrusted {
        Route::Dma
    } else {
        Route::Fifo
    }
}

#[derive(Clone, Debug)]
pub struct Hardware {
    manifest: MachineManifest,
    now: Tick,
    domains: BTreeMap<DomainId, DomainState>,
    mailboxes: BTreeMap<MailboxId, MailboxState>,
    queues: Vec<QueueState>,
    last_route: BTreeMap<DomainId, Route>,
    tpm: PcrBank,
    devices: BTreeMap<DomainId, Device>,
    trace: Vec<TraceEvent>,
    reinstall: BTreeSet<DomainId>,
    pub faults: Faults,
    pub workload: Script,
    pub boot_status: BootStatus,
    /// Programs launched from the resource-manager shell, oldest first.
    pub launches: Vec<String>,
    mutant: Option<Mutant>,
}

impl Hardware {
    fn new(manifest: MachineManifest, mutant: Option<Mutant>, faults: Faults) -> Result<Self, PlatformError> {
        manifest.validate()?;
        let mut domains = BTreeMap::new();
        for spec in &manifest.domains {
            domains.insert(
                spec.id,
                DomainState {
                    spec: spec.clone(),
                    memory: vec![0; spec.memory_size],
                    run: RunState::HeldInReset,
                    installed: None,
                    boots: 0,
                },
            );
        }
        let mut mailboxes = BTreeMap::new();
        for mb in &manifest.mailboxes {
            let st = match mutant {
                Some(m) => MailboxState::new_mutant(mb.config.clone(), m),
                None => MailboxState::new(mb.config.clone()),
            }
            .map_err(|e| PlatformError::InvalidManifest(e.to_string()))?;
            mailboxes.insert(mb.config.id, st);
        }
        let queues = manifest
            .queues
            .iter()
            .map(|q| QueueState { spec: q.clone(), fwd: VecDeque::new(), back: VecDeque::new() })
            .collect();
        let mut devices = BTreeMap::new();
        for spec in &manifest.domains {
            let DomainKind::Io(kind) = spec.kind else { continue };
            let dev = match kind {
                DeviceKind::SerialIn => Device::SerialIn { input: VecDeque::new() },
                DeviceKind::SerialOut => Device::SerialOut { output: Vec::new() },
                DeviceKind::Storage => {
                    let mut drive = StorageDrive::new(manifest.storage.blocks);
                    let images: Vec<BootImage> = manifest
                        .images
                        .iter()
                        .filter(|i| Some(&i.name) != faults.missing_image.as_ref())
                        .cloned()
                        .collect();
                    drive.format_bootfs(&images, manifest.storage.boot_partition_blocks);
                    if let Some(name) = &faults.tamper_image {
                        if let Some(e) = drive.bootfs_lookup(name) {
                            if let Some(b) = drive.bytes_mut(e.offset as usize * crate::devices::BLOCK_SIZE, 1) {
                                b[0] ^= 0xFF;
                            }
                        }
                    }
                    Device::Storage(drive)
                }
                DeviceKind::Network => {
                    let mut link = NetLink::new(Responder::Loopback);
                    link.down = faults.link_down;
                    Device::Network(link)
                }
                DeviceKind::GlucoseSensor => Device::GlucoseSensor { readings: VecDeque::new(), last: 100 },
                DeviceKind::InsulinPump => Device::InsulinPump(Pump::new(crate::peers::provider_key())),
            };
            devices.insert(spec.id, dev);
        }
        Ok(Hardware {
            manifest,
            now: 0,
            domains,
            mailboxes,
            queues,
            last_route: BTreeMap::new(),
            tpm: PcrBank::new(MAX_PCRS),
            devices,
            trace: Vec::new(),
            reinstall: BTreeSet::new(),
            faults,
            workload: Script::default(),
            boot_status: BootStatus::NotStarted,
            launches: Vec::new(),
            mutant,
        })
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn manifest(&self) -> &MachineManifest {
        &self.manifest
    }

    pub fn mutant(&self) -> Option<Mutant> {
        self.mutant
    }

    pub fn domain(&self, id: DomainId) -> Option<&DomainState> {
        self.domains.get(&id)
    }

    pub fn domain_ids(&self) -> Vec<DomainId> {
        self.domains.keys().copied().collect()
    }

    pub fn mailbox(&self, id: MailboxId) -> Option<&MailboxState> {
        self.mailboxes.get(&id)
    }

    pub fn mailboxes(&self) -> impl Iterator<Item = &MailboxState> {
        self.mailboxes.values()
    }

    pub fn queues(&self) -> &[QueueState] {
        &self.queues
    }

    pub fn tpm(&self) -> &PcrBank {
        &self.tpm
    }

    pub fn device(&self, id: DomainId) -> Option<&Device> {
        self.devices.get(&id)
    }

    pub fn device_mut(&mut self, id: DomainId) -> Option<&mut Device> {
        self.devices.get_mut(&id)
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn pcr_of(&self, id: DomainId) -> Option<Digest> {
        let idx = self.domains.get(&id)?.spec.pcr_index;
        self.tpm.get(idx).ok()
    }

    pub fn untrusted(&self) -> DomainId {
        self.manifest.untrusted().expect("validated manifest")
    }

    pub fn plane_of(&self, id: MailboxId) -> Option<Plane> {
        self.manifest.mailboxes.iter().find(|m| m.config.id == id).map(|m| m.plane)
    }

    pub fn emit(
        &mut self,
        event: EventKind,
        domain: Option<DomainId>,
        mailbox: Option<MailboxId>,
        detail: impl Into<String>,
    ) {
        self.trace.push(TraceEvent { tick: self.now, event, domain, mailbox, detail: detail.into() });
    }

    pub fn arbiter_route(&self, io: DomainId) -> Result<Route, PlatformError> {
        let arb = self.manifest.arbiters.iter().find(|a| a.io_domain == io).ok_or(PlatformError::NoArbiter(io))?;
        let mb = self.mailboxes.get(&arb.data_mailbox).ok_or(PlatformError::UnknownMailbox(arb.data_mailbox))?;
        Ok(route_for(mb, self.untrusted(), self.now))
    }

    fn expire_all(&mut self) {
        let now = self.now;
        let mut expired = Vec::new();
        for mb in self.mailboxes.values_mut() {
            let owner = mb.owner();
            if mb.expire_check(now) {
                expired.push((mb.id(), owner));
            }
        }
        for (id, owner) in expired {
            self.emit(EventKind::SessionExpired, Some(owner), Some(id), "time");
        }
    }

    fn update_routes(&mut self) {
        let ios: Vec<DomainId> = self.manifest.arbiters.iter().map(|a| a.io_domain).collect();
        for io in ios {
            let Ok(route) = self.arbiter_route(io) else { continue };
            if self.last_route.insert(io, route) != Some(route) {
                let detail = format!("{route:?}").to_lowercase();
                self.emit(EventKind::ArbiterRoute, Some(io), None, detail);
            }
        }
    }

    /// Wipes memory, clears the PCR and measures the image. Used by the ROM
    /// bootloader and by the staged boot.
    fn install(&mut self, id: DomainId, image: BootImage) -> Result<Digest, PlatformError> {
        let d = self.domains.get_mut(&id).ok_or(PlatformError::UnknownDomain(id))?;
        let pcr = attestation::bootload(&mut d.memory, d.spec.pcr_index, Some(&image), &mut self.tpm)
            .map_err(|e| PlatformError::InvalidManifest(e.to_string()))?;
        let n = image.bytes.len().min(d.memory.len());
        d.memory[..n].copy_from_slice(&image.bytes[..n]);
        d.run = RunState::Running;
        d.boots += 1;
        let name = image.name.clone();
        d.installed = Some(image);
        self.reinstall.insert(id);
        self.emit(EventKind::ImageLoaded, Some(id), None, format!("{name} pcr={}", pcr.to_hex()));
        Ok(pcr)
    }

    fn rom_self_load(&mut self, id: DomainId) -> Result<(), PlatformError> {
        let name = self.domains[&id].spec.image.clone();
        self.emit(EventKind::BootStart, Some(id), None, format!("rom {name}"));
        let image = match self.devices.get(&id) {
            Some(Device::Storage(drive)) => drive.bootfs_image(&name),
            _ => None,
        };
        match image {
            Some(img) => self.install(id, img).map(|_| ()),
            None => {
                self.emit(EventKind::BootAborted, Some(id), None, name.clone());
                self.boot_status = BootStatus::Aborted(name.clone());
                Err(PlatformError::BootAborted(name))
            }
        }
    }

    fn reset_domain(&mut self, target: DomainId) {
        let now = self.now;
        let d = self.domains.get_mut(&target).expect("checked by caller");
        d.memory.fill(0);
        let image = d.installed.clone();
        let pcr_index = d.spec.pcr_index;
        match image {
            Some(img) => {
                let _ = self.install(target, img);
            }
            None => {
                let _ = self.tpm.clear_for_boot(pcr_index);
                let d = self.domains.get_mut(&target).expect("present");
                d.run = RunState::Booting;
                self.reinstall.insert(target);
            }
        }
        let mut wiped = Vec::new();
        for mb in self.mailboxes.values_mut() {
            if mb.config().fixed_end == target {
                mb.hw_reset();
                wiped.push(mb.id());
            }
        }
        for id in wiped {
            self.emit(EventKind::MailboxReset, Some(target), Some(id), "");
        }
        for q in self.queues.iter_mut() {
            if q.peer_of(Endpoint::Domain(target)).is_some() {
                q.wipe_towards(Endpoint::Domain(target));
            }
        }
        self.emit(EventKind::DomainReset, Some(target), None, format!("at {now}"));
    }

    pub fn request_reset(&mut self, caller: DomainId, target: DomainId) -> Result<(), ResetError> {
        if !caller.is_rm() {
            self.emit(EventKind::AccessDenied, Some(caller), None, format!("reset {target}"));
            return Err(ResetError::NotResourceManager);
        }
        if target.is_rm() {
            return Err(ResetError::SelfReset);
        }
        if !self.domains.contains_key(&target) {
            return Err(ResetError::UnknownDomain(target));
        }
        if let Some(mb) = reset_guard(self.mailboxes.values(), target, self.now) {
            self.emit(EventKind::ResetBlocked, Some(target), Some(mb), "live session");
            return Err(ResetError::Blocked(mb));
        }
        self.reset_domain(target);
        Ok(())
    }

    pub fn dma(&mut self, caller: DomainId, io: DomainId, dir: DmaDir, addr: u64, len: usize) -> Result<usize, DmaError> {
        let untrusted = self.untrusted();
        if caller != untrusted {
            return Err(DmaError::NotUntrusted);
        }
        let Some(arb) = self.manifest.arbiters.iter().find(|a| a.io_domain == io).cloned() else {
            return Err(DmaError::NoArbiter);
        };
        let detail = format!("{dir:?} addr={addr:#x} len={len}");
        let route = self.arbiter_route(io).map_err(|_| DmaError::NoArbiter)?;
        if route != Route::Dma {
            self.emit(EventKind::DmaRejected, Some(caller), Some(arb.data_mailbox), format!("route fifo; {detail}"));
            return Err(DmaError::RouteDisabled);
        }
        if !arb.dma_window.contains_range(addr, len as u64) {
            self.emit(EventKind::DmaRejected, Some(caller), Some(arb.data_mailbox), format!("window; {detail}"));
            return Err(DmaError::WindowViolation);
        }
        let base = self.domains[&untrusted].spec.mem_base;
        let off = (addr - base) as usize;
        let moved = match dir {
            DmaDir::ToDevice => {
                let bytes = self.domains[&untrusted].memory[off..off + len].to_vec();
                let Some(Device::Network(link)) = self.devices.get_mut(&io) else {
                    return Err(DmaError::NoArbiter);
                };
                if !link.transmit(bytes) {
                    return Err(DmaError::LinkDown);
                }
                len
            }
            DmaDir::FromDevice => {
                let Some(Device::Network(link)) = self.devices.get_mut(&io) else {
                    return Err(DmaError::NoArbiter);
                };
                match link.inbound.front() {
                    None => 0,
                    Some(p) if p.len() > len => return Err(DmaError::BufferTooSmall),
                    Some(_) => {
                        let p = link.inbound.pop_front().expect("front exists");
                        let mem = &mut self.domains.get_mut(&untrusted).expect("present").memory;
                        mem[off..off + p.len()].copy_from_slice(&p);
                        p.len()
                    }
                }
            }
        };
        self.emit(EventKind::DmaTransfer, Some(caller), Some(arb.data_mailbox), detail);
        self.emit(EventKind::DmaDone, Some(caller), Some(arb.data_mailbox), format!("{moved} bytes"));
        Ok(moved)
    }

    fn queue_index(&self, a: Endpoint, b: Endpoint) -> Option<usize> {
        self.queues.iter().position(|q| q.connects(a, b))
    }

    fn serve_tpm(&mut self) {
        let mut pending: Vec<(Tick, DomainId, usize)> = Vec::new();
        for (qi, q) in self.queues.iter().enumerate() {
            let Some(Endpoint::Domain(d)) = q.peer_of(Endpoint::Tpm) else { continue };
            let lane = if q.spec.endpoints[0] == Endpoint::Domain(d) { &q.fwd } else { &q.back };
            pending.extend(lane.iter().map(|(t, _)| (*t, d, qi)));
        }
        pending.sort();
        for (_, d, qi) in pending {
            let q = &mut self.queues[qi];
            if q.lane(Endpoint::Tpm).len() >= q.spec.depth {
                continue;
            }
            let Some((_, bytes)) = q.lane(Endpoint::Domain(d)).pop_front() else { continue };
            let resp = self.tpm_one(d, &bytes);
            let now = self.now;
            self.queues[qi].lane(Endpoint::Tpm).push_back((now, resp.encode()));
        }
    }

    fn tpm_one(&mut self, d: DomainId, bytes: &[u8]) -> Frame {
        let pcr_index = self.domains[&d].spec.pcr_index;
        let req = match Frame::decode(bytes) {
            Ok(f) if f.op == op::TPM_EXTEND && f.payload.len() == 33 => Digest::from_slice(&f.payload[1..])
                .map(|m| TpmRequest::Extend { pcr: f.payload[0], measurement: m }),
            Ok(f) if f.op == op::TPM_QUOTE => {
                protocol::parse_tpm_quote(&f).map(|(nonce, selection)| TpmRequest::Quote { nonce, selection })
            }
            Ok(f) if f.op == op::TPM_READ && f.payload.len() == 1 => Some(TpmRequest::Read { pcr: f.payload[0] }),
            _ => None,
        };
        let Some(req) = req else {
            return Frame::new(op::TPM_ERROR, (protocol::ErrCode::Malformed as u16).to_le_bytes());
        };
        let key = self.manifest.device_key;
        match attestation::tpm_mediate(&mut self.tpm, pcr_index, &req, &key) {
            TpmResponse::Extended(v) => {
                let idx = match req {
                    TpmRequest::Extend { pcr, .. } => pcr,
                    _ => pcr_index,
                };
                self.emit(EventKind::PcrExtended, Some(d), None, format!("pcr{idx}={}", &v.to_hex()[..16]));
                Frame::new(op::TPM_EXTENDED, v.0.to_vec())
            }
            TpmResponse::Quote(q) => {
                let sel: Vec<String> = q.selection.iter().map(|i| i.to_string()).collect();
                self.emit(EventKind::QuoteIssued, Some(d), None, format!("pcrs {}", sel.join(",")));
                protocol::quote_resp_frame(&q)
            }
            TpmResponse::Value(v) => Frame::new(op::TPM_VALUE, v.0.to_vec()),
            TpmResponse::Error(e) => {
                let code = if e == attestation::AttestError::ForbiddenExtend {
                    self.emit(EventKind::TpmForbidden, Some(d), None, e.to_string());
                    protocol::ErrCode::Forbidden
                } else {
                    protocol::ErrCode::BadRequest
                };
                Frame::new(op::TPM_ERROR, (code as u16).to_le_bytes())
            }
        }
    }
}

/// A domain's view of the hardware during its quantum. Everything is
/// scoped to the domain itself: its memory, its side of mailboxes and
/// queues, and its own device.
pub struct DomainCtx<'a> {
    hw: &'a mut Hardware,
    me: DomainId,
}

impl<'a> DomainCtx<'a> {
    pub fn id(&self) -> DomainId {
        self.me
    }

    pub fn now(&self) -> Tick {
        self.hw.now
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.hw.domains[&self.me].spec
    }

    pub fn manifest(&self) -> &MachineManifest {
        &self.hw.manifest
    }

    pub fn faults(&self) -> &Faults {
        &self.hw.faults
    }

    pub fn hw(&self) -> &Hardware {
        self.hw
    }

    pub fn memory(&self) -> &[u8] {
        &self.hw.domains[&self.me].memory
    }

    pub fn memory_mut(&mut self) -> &mut [u8] {
        &mut self.hw.domains.get_mut(&self.me).expect("own domain").memory
    }

    /// Attempted read of another domain's memory. Always refused unless the
    /// address is the caller's own.
    pub fn peek(&mut self, target: DomainId, offset: usize) -> Option<u8> {
        if target == self.me {
            return self.memory().get(offset).copied();
        }
        self.emit(EventKind::AccessDenied, None, format!("memory of {target} at {offset:#x}"));
        None
    }

    pub fn poke(&mut self, target: DomainId, offset: usize, value: u8) -> bool {
        if target == self.me {
            if let Some(b) = self.memory_mut().get_mut(offset) {
                *b = value;
                return true;
            }
            return false;
        }
        self.emit(EventKind::AccessDenied, None, format!("write memory of {target} at {offset:#x}"));
        false
    }

    pub fn emit(&mut self, event: EventKind, mailbox: Option<MailboxId>, detail: impl Into<String>) {
        let me = self.me;
        self.hw.emit(event, Some(me), mailbox, detail);
    }

    /// Event attributed to another domain, e.g. the target of a reset.
    pub fn emit_about(&mut self, domain: DomainId, event: EventKind, mailbox: Option<MailboxId>, detail: impl Into<String>) {
        self.hw.emit(event, Some(domain), mailbox, detail);
    }

    fn mb(&mut self, id: MailboxId) -> Result<&mut MailboxState, MailboxError> {
        self.hw.mailboxes.get_mut(&id).ok_or(MailboxError::NoAccess)
    }

    pub fn mb_write(&mut self, id: MailboxId, msg: &[u8]) -> Result<Metering, MailboxError> {
        let (me, now) = (self.me, self.hw.now);
        let res = self.mb(id)?.write(me, msg, now);
        self.log_data_op(EventKind::MsgWrite, id, msg, &res.clone().map(|m| (Vec::new(), m)));
        res
    }

    pub fn mb_read(&mut self, id: MailboxId) -> Result<Vec<u8>, MailboxError> {
        self.mb_read_metered(id).map(|(m, _)| m)
    }

    pub fn mb_read_metered(&mut self, id: MailboxId) -> Result<(Vec<u8>, Metering), MailboxError> {
        let (me, now) = (self.me, self.hw.now);
        let res = self.mb(id)?.read(me, now);
        let msg = res.as_ref().map(|(m, _)| m.clone()).unwrap_or_default();
        self.log_data_op(EventKind::MsgRead, id, &msg, &res);
        res
    }

    fn log_data_op(
        &mut self,
        kind: EventKind,
        id: MailboxId,
        msg: &[u8],
        res: &Result<(Vec<u8>, Metering), MailboxError>,
    ) {
        match res {
            Ok((_, metering)) => {
                let op = Frame::decode(msg).map(|f| f.op).unwrap_or(0);
                let left = match metering {
                    Metering::Unmetered => String::new(),
                    Metering::Metered(l) => format!(" left={l}"),
                    Metering::Exhausted => " left=0".to_string(),
                };
                self.emit(kind, Some(id), format!("op={op:#06x} len={}{left}", msg.len()));
                if *metering == Metering::Exhausted {
                    self.emit(EventKind::SessionExpired, Some(id), "msgs");
                }
            }
            Err(MailboxError::NoAccess) => self.emit(EventKind::AccessDenied, Some(id), format!("{kind:?}")),
            Err(_) => {}
        }
    }

    pub fn send(&mut self, id: MailboxId, frame: &Frame) -> Result<Metering, MailboxError> {
        self.mb_write(id, &frame.encode())
    }

    /// Reads one message. `Ok(Err(_))` is a malformed frame that was
    /// consumed from the queue.
    pub fn recv(&mut self, id: MailboxId) -> Result<Result<Frame, protocol::FrameError>, MailboxError> {
        self.mb_read(id).map(|b| Frame::decode(&b))
    }

    pub fn status(&self, id: MailboxId) -> MailboxStatus {
        match self.hw.mailboxes.get(&id) {
            Some(mb) => mb.read_status(self.me, self.hw.now),
            None => MailboxStatus::DUMMY,
        }
    }

    pub fn mailbox_len(&self, id: MailboxId) -> Option<usize> {
        // Occupancy is visible only to parties with access.
        let st = self.status(id);
        if st.is_dummy {
            return None;
        }
        self.hw.mailboxes.get(&id).map(|m| m.len())
    }

    pub fn mailbox_full(&self, id: MailboxId) -> bool {
        self.hw.mailboxes.get(&id).is_none_or(|m| m.is_full())
    }

    pub fn delegate(&mut self, id: MailboxId, target: DomainId, quota: Quota) -> Result<(), MailboxError> {
        let (me, now) = (self.me, self.hw.now);
        let res = self.mb(id)?.delegate(me, target, quota, now);
        match &res {
            Ok(()) => self.emit(
                EventKind::Delegated,
                Some(id),
                format!("to {target} msgs={} deadline={}", quota.msgs, quota.deadline),
            ),
            Err(e) => self.emit(EventKind::AccessDenied, Some(id), format!("delegate to {target}: {e}")),
        }
        res
    }

    pub fn yield_mailbox(&mut self, id: MailboxId) -> Result<(), MailboxError> {
        let (me, now) = (self.me, self.hw.now);
        let res = self.mb(id)?.yield_access(me, now);
        match &res {
            Ok(()) => self.emit(EventKind::Yielded, Some(id), ""),
            Err(e) => self.emit(EventKind::AccessDenied, Some(id), format!("yield: {e}")),
        }
        res
    }

    pub fn reset(&mut self, target: DomainId) -> Result<(), ResetError> {
        let me = self.me;
        self.hw.request_reset(me, target)
    }

    fn queue_to(&mut self, peer: Endpoint) -> Result<&mut QueueState, QueueError> {
        let i = self.hw.queue_index(Endpoint::Domain(self.me), peer).ok_or(QueueError::NoQueue)?;
        Ok(&mut self.hw.queues[i])
    }

    pub fn q_send(&mut self, peer: Endpoint, frame: &Frame) -> Result<(), QueueError> {
        let bytes = frame.encode();
        let (me, now) = (Endpoint::Domain(self.me), self.hw.now);
        let q = self.queue_to(peer)?;
        if bytes.len() > q.spec.msg_size {
            return Err(QueueError::TooLarge);
        }
        let depth = q.spec.depth;
        let lane = q.lane(me);
        if lane.len() >= depth {
            return Err(QueueError::Full);
        }
        lane.push_back((now, bytes));
        Ok(())
    }

    pub fn q_recv(&mut self, peer: Endpoint) -> Option<Result<Frame, protocol::FrameError>> {
        let q = self.queue_to(peer).ok()?;
        let (_, bytes) = q.lane(peer).pop_front()?;
        Some(Frame::decode(&bytes))
    }

    pub fn q_has_room(&mut self, peer: Endpoint) -> bool {
        let me = Endpoint::Domain(self.me);
        match self.queue_to(peer) {
            Ok(q) => {
                let depth = q.spec.depth;
                q.lane(me).len() < depth
            }
            Err(_) => false,
        }
    }

    pub fn queue_peers(&self) -> Vec<Endpoint> {
        let me = Endpoint::Domain(self.me);
        self.hw.queues.iter().filter_map(|q| q.peer_of(me)).collect()
    }

    pub fn device(&self) -> Option<&Device> {
        self.hw.devices.get(&self.me)
    }

    pub fn device_mut(&mut self) -> Option<&mut Device> {
        self.hw.devices.get_mut(&self.me)
    }

    /// Route of this domain's arbiter, if it has one.
    pub fn route(&self) -> Option<Route> {
        self.hw.arbiter_route(self.me).ok()
    }

    pub fn dma(&mut self, io: DomainId, dir: DmaDir, addr: u64, len: usize) -> Result<usize, DmaError> {
        let me = self.me;
        self.hw.dma(me, io, dir, addr, len)
    }

    /// Bootloader hand-off: measure and start `image` in this domain.
    pub fn install_image(&mut self, image: BootImage) -> Result<Digest, PlatformError> {
        let me = self.me;
        self.hw.install(me, image)
    }

    pub fn set_boot_status(&mut self, status: BootStatus) {
        self.hw.boot_status = status;
    }

    pub fn record_launch(&mut self, name: &str) {
        self.hw.launches.push(name.to_string());
    }

    pub fn run_state(&self, id: DomainId) -> Option<RunState> {
        self.hw.domains.get(&id).map(|d| d.run)
    }
}

/// Mailbox ids grouped by the I/O domain they belong to.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ServicePorts {
    /// Fixed-reader mailboxes: client to service.
    pub inbound: Vec<MailboxId>,
    /// Fixed-writer mailboxes: service to client.
    pub outbound: Vec<MailboxId>,
}

pub fn service_ports(manifest: &MachineManifest, io: DomainId) -> ServicePorts {
    let mut p = ServicePorts::default();
    for mb in &manifest.mailboxes {
        if mb.config.fixed_end != io {
            continue;
        }
        match mb.config.fixed_role {
            crate::mailbox::FixedRole::FixedReader => p.inbound.push(mb.config.id),
            crate::mailbox::FixedRole::FixedWriter => p.outbound.push(mb.config.id),
        }
    }
    p
}

#[derive(Clone, Debug)]
pub struct Machine {
    hw: Hardware,
    programs: BTreeMap<DomainId, Firmware>,
}

type Quantum<'q> = Option<(DomainId, Box<dyn FnOnce(&mut DomainCtx<'_>) + 'q>)>;

impl Machine {
    pub fn build(manifest: MachineManifest) -> Result<Machine, PlatformError> {
        Self::build_with(manifest, None, Faults::default())
    }

    pub fn build_with(manifest: MachineManifest, mutant: Option<Mutant>, faults: Faults) -> Result<Machine, PlatformError> {
        let hw = Hardware::new(manifest, mutant, faults)?;
        let programs = hw.domains.keys().map(|&id| (id, Firmware::Held)).collect();
        Ok(Machine { hw, programs })
    }

    pub fn default_machine() -> Machine {
        Self::build(MachineManifest::default_machine()).expect("default manifest is valid")
    }

    pub fn hw(&self) -> &Hardware {
        &self.hw
    }

    pub fn hw_mut(&mut self) -> &mut Hardware {
        &mut self.hw
    }

    pub fn now(&self) -> Tick {
        self.hw.now
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.hw.trace
    }

    pub fn program(&self, id: DomainId) -> Option<&Firmware> {
        self.programs.get(&id)
    }

    pub fn program_mut(&mut self, id: DomainId) -> Option<&mut Firmware> {
        self.programs.get_mut(&id)
    }

    /// Power-on: the storage domain loads itself from ROM, then the resource
    /// manager bootloader starts fetching its own image.
    pub fn power_on(&mut self) -> Result<(), PlatformError> {
        self.hw.emit(EventKind::PowerOn, None, None, "");
        self.hw.boot_status = BootStatus::InProgress;
        let storage = self
            .hw
            .manifest
            .device_domain(DeviceKind::Storage)
            .ok_or_else(|| PlatformError::InvalidManifest("no storage".into()))?;
        self.hw.rom_self_load(storage)?;
        self.apply_reinstalls();
        let rm = DomainId::RESOURCE_MANAGER;
        self.hw.domains.get_mut(&rm).expect("rm exists").run = RunState::Booting;
        let name = self.hw.domains[&rm].spec.image.clone();
        self.hw.emit(EventKind::BootStart, Some(rm), None, name);
        let fw = Firmware::for_domain(&self.hw, rm);
        self.programs.insert(rm, fw);
        Ok(())
    }

    /// Powers on and runs until every domain has started.
    pub fn boot(&mut self, max_ticks: u64) -> Result<Tick, PlatformError> {
        self.power_on()?;
        let start = self.hw.now;
        while self.hw.now - start < max_ticks {
            match &self.hw.boot_status {
                BootStatus::Complete => return Ok(self.hw.now - start),
                BootStatus::Aborted(name) => return Err(PlatformError::BootAborted(name.clone())),
                _ => {}
            }
            self.step();
        }
        match &self.hw.boot_status {
            BootStatus::Complete => Ok(self.hw.now - start),
            BootStatus::Aborted(name) => Err(PlatformError::BootAborted(name.clone())),
            _ => Err(PlatformError::BootTimeout(max_ticks)),
        }
    }

    fn apply_reinstalls(&mut self) {
        let ids = std::mem::take(&mut self.hw.reinstall);
        for id in ids {
            let fw = Firmware::for_domain(&self.hw, id);
            self.programs.insert(id, fw);
        }
    }

    fn tick(&mut self, mut quantum: Quantum<'_>) {
        self.hw.expire_all();
        self.hw.update_routes();
        let ids: Vec<DomainId> = self.hw.domains.keys().copied().collect();
        for id in ids {
            let host = if quantum.as_ref().is_some_and(|(d, _)| *d == id) {
                quantum.take().map(|(_, f)| f)
            } else {
                None
            };
            let mut ctx = DomainCtx { hw: &mut self.hw, me: id };
            match host {
                Some(f) => f(&mut ctx),
                None => {
                    let mut fw = std::mem::replace(self.programs.get_mut(&id).expect("program"), Firmware::Held);
                    fw.run(&mut ctx);
                    if !self.hw.reinstall.contains(&id) {
                        self.programs.insert(id, fw);
                    }
                }
            }
            self.apply_reinstalls();
        }
        self.hw.serve_tpm();
        self.hw.now += 1;
    }

    pub fn step(&mut self) {
        self.tick(None);
    }

    pub fn run(&mut self, ticks: u64) {
        for _ in 0..ticks {
            self.step();
        }
    }

    /// Runs one tick in which `f` replaces the quantum of `domain`.
    pub fn act<R>(&mut self, domain: DomainId, f: impl FnOnce(&mut DomainCtx<'_>) -> R) -> R {
        let mut out = None;
        let slot = &mut out;
        self.tick(Some((domain, Box::new(move |ctx: &mut DomainCtx<'_>| *slot = Some(f(ctx))))));
        out.expect("domain exists and ran")
    }

    /// Direct register-level access outside the tick loop, for tests and
    /// host tooling. Does not advance time.
    pub fn with_ctx<R>(&mut self, domain: DomainId, f: impl FnOnce(&mut DomainCtx<'_>) -> R) -> R {
        let mut ctx = DomainCtx { hw: &mut self.hw, me: domain };
        let r = f(&mut ctx);
        self.apply_reinstalls();
        r
    }

    pub fn request_reset(&mut self, caller: DomainId, target: DomainId) -> Result<(), ResetError> {
        let r = self.hw.request_reset(caller, target);
        self.apply_reinstalls();
        r
    }

    pub fn arbiter_route(&self, io: DomainId) -> Result<Route, PlatformError> {
        self.hw.arbiter_route(io)
    }

    pub fn dma_transfer(&mut self, io: DomainId, dir: DmaDir, addr: u64, len: usize) -> Result<usize, DmaError> {
        let u = self.hw.untrusted();
        self.hw.dma(u, io, dir, addr, len)
    }

    pub fn set_responder(&mut self, responder: Responder) {
        for dev in self.hw.devices.values_mut() {
            if let Device::Network(link) = dev {
                link.responder = responder.clone();
            }
        }
    }

    pub fn link(&self) -> Option<&NetLink> {
        self.hw.devices.values().find_map(|d| match d {
            Device::Network(l) => Some(l),
            _ => None,
        })
    }

    pub fn link_mut(&mut self) -> Option<&mut NetLink> {
        self.hw.devices.values_mut().find_map(|d| match d {
            Device::Network(l) => Some(l),
            _ => None,
        })
    }

    pub fn push_input(&mut self, line: &str) {
        for dev in self.hw.devices.values_mut() {
            if let Device::SerialIn { input } = dev {
                input.push_back(line.to_string());
            }
        }
    }

    pub fn push_glucose(&mut self, readings: &[u16]) {
        for dev in self.hw.devices.values_mut() {
            if let Device::GlucoseSensor { readings: r, .. } = dev {
                r.extend(readings.iter().copied());
            }
        }
    }

    /// Everything printed to the terminal so far.
    pub fn terminal(&self) -> Vec<String> {
        self.hw
            .devices
            .values()
            .find_map(|d| match d {
                Device::SerialOut { output } => Some(output.clone()),
                _ => None,
            })
            .unwrap_or_default()
    }

    pub fn pump(&self) -> Option<&Pump> {
        self.hw.devices.values().find_map(|d| match d {
            Device::InsulinPump(p) => Some(p),
            _ => None,
        })
    }

    pub fn drive(&self) -> Option<&StorageDrive> {
        self.hw.devices.values().find_map(|d| match d {
            Device::Storage(s) => Some(s),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mailbox::{MailboxConfig, MsgLimit};
    use crate::manifest::{NETWORK, STORAGE, TEE1, TEE2, UNTRUSTED};

    fn mb(fixed: u8, owner: Option<(u8, Tick)>) -> MailboxState {
        let cfg = MailboxConfig {
            id: MailboxId(1),
            name: "m".into(),
            fixed_end: DomainId(fixed),
            fixed_role: crate::mailbox::FixedRole::FixedReader,
            wired_delegates: [DomainId(0), DomainId(1), DomainId(2), DomainId(7)].into_iter().collect(),
            depth: 2,
            msg_size: 8,
        };
        let mut m = MailboxState::new(cfg).unwrap();
        if let Some((o, deadline)) = owner {
            m.delegate(DomainId(0), DomainId(o), Quota { msgs: MsgLimit::Infinite, deadline }, 0).unwrap();
        }
        m
    }

    #[test]
    fn guard_blocks_owner_and_fixed_end_only() {
        let m = mb(5, Some((1, 10)));
        assert_eq!(reset_guard([&m], DomainId(1), 3), Some(MailboxId(1)));
        assert_eq!(reset_guard([&m], DomainId(5), 3), Some(MailboxId(1)));
        assert_eq!(reset_guard([&m], DomainId(2), 3), None);
        // Expired sessions do not block.
        assert_eq!(reset_guard([&m], DomainId(1), 10), None);
        assert_eq!(reset_guard([&mb(5, None)], DomainId(5), 0), None);
    }

    #[test]
    fn route_follows_owner() {
        assert_eq!(route_for(&mb(6, None), DomainId(7), 0), Route::Fifo);
        assert_eq!(route_for(&mb(6, Some((1, 5))), DomainId(7), 0), Route::Fifo);
        let u = mb(6, Some((7, 5)));
        assert_eq!(route_for(&u, DomainId(7), 4), Route::Dma);
        assert_eq!(route_for(&u, DomainId(7), 5), Route::Fifo);
    }

    #[test]
    fn only_rm_resets_and_guard_applies() {
        let mut m = Machine::default_machine();
        assert_eq!(m.request_reset(TEE1, TEE2), Err(ResetError::NotResourceManager));
        assert_eq!(m.request_reset(DomainId(0), DomainId(0)), Err(ResetError::SelfReset));
        m.with_ctx(DomainId(0), |c| {
            c.delegate(MailboxId(4), TEE1, Quota { msgs: MsgLimit::Infinite, deadline: 50 }).unwrap();
        });
        assert_eq!(m.request_reset(DomainId(0), STORAGE), Err(ResetError::Blocked(MailboxId(4))));
        assert_eq!(m.request_reset(DomainId(0), TEE1), Err(ResetError::Blocked(MailboxId(4))));
        assert_eq!(m.request_reset(DomainId(0), TEE2), Ok(()));
    }

    #[test]
    fn reset_zeroes_memory_and_clears_fixed_mailboxes() {
        let mut m = Machine::default_machine();
        m.with_ctx(TEE2, |c| c.memory_mut()[10] = 0xAA);
        m.with_ctx(DomainId(0), |c| {
            c.delegate(MailboxId(10), TEE1, Quota { msgs: MsgLimit::Finite(4), deadline: 3 }).unwrap();
        });
        m.with_ctx(TEE1, |c| c.send(MailboxId(10), &Frame::ok()).unwrap());
        m.run(3);
        m.request_reset(DomainId(0), TEE2).unwrap();
        assert_eq!(m.hw().domain(TEE2).unwrap().memory[10], 0);
        let ipc = m.hw().mailbox(MailboxId(10)).unwrap();
        assert!(ipc.is_empty() && !ipc.is_delegated());
    }

    #[test]
    fn dma_requires_untrusted_ownership_and_window() {
        let mut m = Machine::default_machine();
        let win = m.hw().manifest().arbiters[0].dma_window;
        assert_eq!(m.dma_transfer(NETWORK, DmaDir::ToDevice, win.start, 4), Err(DmaError::RouteDisabled));
        m.with_ctx(DomainId(0), |c| {
            c.delegate(MailboxId(8), UNTRUSTED, Quota { msgs: MsgLimit::Infinite, deadline: 100 }).unwrap();
        });
        assert_eq!(m.arbiter_route(NETWORK), Ok(Route::Dma));
        assert_eq!(
            m.dma_transfer(NETWORK, DmaDir::ToDevice, win.end() - 2, 4),
            Err(DmaError::WindowViolation)
        );
        let off = (win.start - UNTRUSTED_BASE_FOR_TEST) as usize;
        m.with_ctx(UNTRUSTED, |c| c.memory_mut()[off..off + 4].copy_from_slice(b"ping"));
        assert_eq!(m.dma_transfer(NETWORK, DmaDir::ToDevice, win.start, 4), Ok(4));
        assert_eq!(m.link().unwrap().sent, vec![b"ping".to_vec()]);
        // Loopback returns it; read it back into a later part of the window.
        assert_eq!(m.dma_transfer(NETWORK, DmaDir::FromDevice, win.start + 64, 2), Err(DmaError::BufferTooSmall));
        assert_eq!(m.dma_transfer(NETWORK, DmaDir::FromDevice, win.start + 64, 16), Ok(4));
        assert_eq!(&m.hw().domain(UNTRUSTED).unwrap().memory[off + 64..off + 68], b"ping");
    }

    const UNTRUSTED_BASE_FOR_TEST: u64 = crate::manifest::UNTRUSTED_BASE;

    #[test]
    fn tpm_serves_extend_for_own_pcr_only() {
        let mut m = Machine::default_machine();
        let d = crate::crypto::hash(b"m");
        m.act(TEE1, |c| {
            c.q_send(Endpoint::Tpm, &protocol::tpm_extend_frame(1, &d)).unwrap();
            c.q_send(Endpoint::Tpm, &protocol::tpm_extend_frame(2, &d)).unwrap();
        });
        let (a, b) = m.act(TEE1, |c| (c.q_recv(Endpoint::Tpm), c.q_recv(Endpoint::Tpm)));
        assert_eq!(a.unwrap().unwrap().op, op::TPM_EXTENDED);
        let b = b.unwrap().unwrap();
        assert_eq!(b.op, op::TPM_ERROR);
        assert_eq!(m.hw().pcr_of(TEE1).unwrap(), attestation::extend_value(&Digest::ZERO, &d));
        assert_eq!(m.hw().pcr_of(TEE2).unwrap(), Digest::ZERO);
        assert!(m.trace().iter().any(|e| e.event == EventKind::TpmForbidden));
    }

    #[test]
    fn faults_parse() {
        let mut f = Faults::default();
        f.apply("rm-skip-reset").unwrap();
        f.apply("tamper-image:bankapp").unwrap();
        assert!(f.rm_skip_reset);
        assert_eq!(f.tamper_image.as_deref(), Some("bankapp"));
        assert!(f.apply("bogus").is_err());
        assert!(f.apply("tamper-image").is_err());
    }
}
