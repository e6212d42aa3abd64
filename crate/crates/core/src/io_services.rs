//! Service programs running in the I/O domains.
//!
//! A service reads at most one frame from each inbound mailbox and writes at
//! most one frame to each outbound mailbox per quantum. Before it handles
//! the first frame after a reset it extends its PCR with the freshness
//! constant and waits for the TPM to acknowledge, so a quote tells a client
//! whether anyone has talked to the service since it was last reset.

use std::collections::{BTreeMap, VecDeque};

use crate::attestation::FRESHNESS_CONST;
use crate::devices::{Device, BLOCK_SIZE};
use crate::mailbox::{DomainId, FixedRole, MailboxId, Tick};
use crate::manifest::{DeviceKind, Endpoint, MachineManifest, Plane};
use crate::platform::{DomainCtx, Route};
use crate::protocol::{self, fragment, get_u16, get_u32, op, ErrCode, Frame, Reassembler};
use crate::trace::EventKind;

/// Largest block count a single READ_BLOCKS or WRITE_BLOCKS may cover.
pub const MAX_IO_BLOCKS: u16 = 8;
/// Longest line the serial-in service returns in one LINE frame.
pub const MAX_LINE: usize = 56;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ports {
    pub ctrl_in: MailboxId,
    pub data_in: Option<MailboxId>,
    pub reply: MailboxId,
    pub data_out: Option<MailboxId>,
}

impl Ports {
    /// Mailbox carrying bulk output; the reply mailbox when there is no
    /// separate one.
    pub fn bulk_out(&self) -> MailboxId {
        self.data_out.unwrap_or(self.reply)
    }

    pub fn bulk_in(&self) -> MailboxId {
        self.data_in.unwrap_or(self.ctrl_in)
    }
}

pub fn ports(manifest: &MachineManifest, io: DomainId) -> Option<Ports> {
    let mine = |role: FixedRole| -> Vec<(MailboxId, Plane)> {
        manifest
            .mailboxes
            .iter()
            .filter(|m| m.config.fixed_end == io && m.config.fixed_role == role)
            .map(|m| (m.config.id, m.plane))
            .collect()
    };
    let pick = |list: &[(MailboxId, Plane)]| -> Option<(MailboxId, Option<MailboxId>)> {
        let main = list.iter().find(|(_, p)| *p == Plane::Control).or(list.first())?.0;
        let data = list.iter().find(|(id, p)| *p == Plane::Data && *id != main).map(|(id, _)| *id);
        Some((main, data))
    };
    let (ctrl_in, data_in) = pick(&mine(FixedRole::FixedReader))?;
    let (reply, data_out) = pick(&mine(FixedRole::FixedWriter))?;
    Some(Ports { ctrl_in, data_in, reply, data_out })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    /// No frame handled since reset.
    Fresh,
    AwaitingFreshness,
    Active,
    Disabled,
}

/// Identity of the session a mailbox currently serves, as seen from the
/// fixed end: owner and absolute deadline.
pub type SessionMarker = (Option<DomainId>, Tick);

fn marker(ctx: &DomainCtx<'_>, mb: MailboxId) -> SessionMarker {
    let st = ctx.status(mb);
    let deadline = if st.time_left == 0 { 0 } else { ctx.now() + st.time_left };
    (st.owner, deadline)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Partition {
    pub first: u32,
    pub last: u32,
    pub credential: [u8; 32],
}

impl Partition {
    pub fn blocks(&self) -> u32 {
        self.last - self.first + 1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct StorageState {
    pub partitions: BTreeMap<u16, Partition>,
    pub bound: Option<u16>,
    pub authed: Option<u16>,
    /// Client API switched off by DISABLE until the next BIND.
    pub client_disabled: bool,
    session: Option<SessionMarker>,
    write_pending: Option<(u32, u16)>,
    data_rx: Reassembler,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IoService {
    pub kind: DeviceKind,
    pub ports: Ports,
    pub phase: Phase,
    held: VecDeque<(MailboxId, Frame)>,
    out: BTreeMap<MailboxId, VecDeque<(SessionMarker, Frame)>>,
    started: bool,
    pending_lines: u32,
    net_rx: Reassembler,
    pub storage: StorageState,
}

impl IoService {
    pub fn new(kind: DeviceKind, ports: Ports) -> Self {
        IoService {
            kind,
            ports,
            phase: Phase::Fresh,
            held: VecDeque::new(),
            out: BTreeMap::new(),
            started: false,
            pending_lines: 0,
            net_rx: Reassembler::default(),
            storage: StorageState::default(),
        }
    }

    pub fn pending_output(&self) -> usize {
        self.out.values().map(|q| q.len()).sum()
    }

    fn push_out(&mut self, ctx: &DomainCtx<'_>, mb: MailboxId, frame: Frame) {
        let m = marker(ctx, mb);
        self.out.entry(mb).or_default().push_back((m, frame));
    }

    fn reply(&mut self, ctx: &DomainCtx<'_>, frame: Frame) {
        let mb = self.ports.reply;
        self.push_out(ctx, mb, frame);
    }

    fn error(&mut self, ctx: &mut DomainCtx<'_>, code: ErrCode) {
        ctx.emit(EventKind::ServiceError, Some(self.ports.reply), code.name());
        self.reply(ctx, Frame::error(code));
    }

    pub fn run(&mut self, ctx: &mut DomainCtx<'_>) {
        if !self.started {
            self.started = true;
            if let Some(Device::Network(link)) = ctx.device_mut() {
                link.inbound.clear();
            }
        }
        while let Some(resp) = ctx.q_recv(Endpoint::Tpm) {
            if let Ok(f) = resp {
                if f.op == op::TPM_EXTENDED && self.phase == Phase::AwaitingFreshness {
                    self.phase = Phase::Active;
                    ctx.emit(EventKind::FreshnessMarked, None, "");
                    while let Some((mb, frame)) = self.held.pop_front() {
                        self.handle(ctx, mb, frame);
                    }
                }
            }
        }
        self.flush(ctx);
        let fifo = ctx.route().is_none_or(|r| r == Route::Fifo);
        if self.kind == DeviceKind::Storage {
            self.track_storage_session(ctx);
        }
        if self.phase != Phase::AwaitingFreshness && fifo {
            let mut inbound = vec![self.ports.ctrl_in];
            inbound.extend(self.ports.data_in);
            for mb in inbound {
                match ctx.recv(mb) {
                    Ok(Ok(frame)) => self.first_or_handle(ctx, mb, frame),
                    Ok(Err(_)) => {
                        if self.phase == Phase::Fresh {
                            self.begin_freshness(ctx);
                        }
                        self.error(ctx, ErrCode::Malformed);
                    }
                    Err(_) => {}
                }
                if self.phase == Phase::AwaitingFreshness {
                    break;
                }
            }
        }
        self.device_work(ctx, fifo);
    }

    fn begin_freshness(&mut self, ctx: &mut DomainCtx<'_>) {
        let pcr = ctx.spec().pcr_index;
        if ctx.q_send(Endpoint::Tpm, &protocol::tpm_extend_frame(pcr, &FRESHNESS_CONST)).is_ok() {
            self.phase = Phase::AwaitingFreshness;
        }
    }

    fn first_or_handle(&mut self, ctx: &mut DomainCtx<'_>, mb: MailboxId, frame: Frame) {
        if self.phase == Phase::Fresh {
            self.begin_freshness(ctx);
            if self.phase == Phase::AwaitingFreshness {
                self.held.push_back((mb, frame));
                return;
            }
        }
        self.handle(ctx, mb, frame);
    }

    fn flush(&mut self, ctx: &mut DomainCtx<'_>) {
        let ids: Vec<MailboxId> = self.out.keys().copied().collect();
        for mb in ids {
            let current = marker(ctx, mb);
            let q = self.out.get_mut(&mb).expect("key present");
            // Output addressed to a session that has since ended is dropped.
            while q.front().is_some_and(|(m, _)| *m != current) {
                q.pop_front();
            }
            let Some((_, frame)) = q.front() else { continue };
            if ctx.mailbox_full(mb) {
                continue;
            }
            let frame = frame.clone();
            if ctx.send(mb, &frame).is_ok() {
                self.out.get_mut(&mb).expect("key present").pop_front();
            }
        }
    }

    fn handle(&mut self, ctx: &mut DomainCtx<'_>, mb: MailboxId, frame: Frame) {
        if frame.op == op::DISABLE {
            if self.kind == DeviceKind::Storage {
                if self.storage.client_disabled {
                    return self.error(ctx, ErrCode::AlreadyDisabled);
                }
                self.storage.client_disabled = true;
                self.storage.authed = None;
            } else {
                if self.phase == Phase::Disabled {
                    return self.error(ctx, ErrCode::AlreadyDisabled);
                }
                self.phase = Phase::Disabled;
            }
            let pending = self.pending_output();
            if pending > 0 || self.pending_lines > 0 {
                ctx.emit(EventKind::DisableWithPendingData, Some(mb), format!("{pending} frames"));
            }
            ctx.emit(EventKind::ServiceDisabled, Some(mb), "");
            return self.reply(ctx, Frame::ok());
        }
        if self.phase == Phase::Disabled {
            return self.error(ctx, ErrCode::Disabled);
        }
        if frame.op == op::QUERY_STATUS {
            let state = match self.phase {
                Phase::Fresh => 0,
                Phase::AwaitingFreshness => 1,
                Phase::Active => 2,
                Phase::Disabled => 3,
            };
            return self.reply(ctx, Frame::new(op::STATUS, vec![state]));
        }
        match self.kind {
            DeviceKind::SerialIn => self.serial_in(ctx, frame),
            DeviceKind::SerialOut => self.serial_out(ctx, frame),
            DeviceKind::Storage => self.storage_frame(ctx, mb, frame),
            DeviceKind::Network => self.network(ctx, frame),
            DeviceKind::GlucoseSensor => self.sensor(ctx, frame),
            DeviceKind::InsulinPump => self.pump(ctx, frame),
        }
    }

    fn serial_in(&mut self, ctx: &mut DomainCtx<'_>, frame: Frame) {
        match frame.op {
            op::READ_LINE if frame.payload.is_empty() => self.pending_lines += 1,
            op::READ_LINE => self.error(ctx, ErrCode::Malformed),
            _ => self.error(ctx, ErrCode::UnknownOp),
        }
    }

    fn serial_out(&mut self, ctx: &mut DomainCtx<'_>, frame: Frame) {
        if frame.op != op::PRINT {
            return self.error(ctx, ErrCode::UnknownOp);
        }
        let text = String::from_utf8_lossy(&frame.payload).into_owned();
        if let Some(Device::SerialOut { output }) = ctx.device_mut() {
            output.push(text.clone());
        }
        ctx.emit(EventKind::DeviceEffect, None, format!("print {text:?}"));
        self.reply(ctx, Frame::ok());
    }

    fn network(&mut self, ctx: &mut DomainCtx<'_>, frame: Frame) {
        let packet = match frame.op {
            op::NET_SEND => Some(frame.payload),
            op::DATA => match self.net_rx.push(&frame.payload) {
                Ok(p) => p,
                Err(code) => return self.error(ctx, code),
            },
            _ => return self.error(ctx, ErrCode::UnknownOp),
        };
        let Some(packet) = packet else { return };
        let len = packet.len();
        let sent = match ctx.device_mut() {
            Some(Device::Network(link)) => link.transmit(packet),
            _ => false,
        };
        if sent {
            ctx.emit(EventKind::NetPacket, None, format!("out {len} bytes"));
        } else {
            self.error(ctx, ErrCode::LinkDown);
        }
    }

    fn sensor(&mut self, ctx: &mut DomainCtx<'_>, frame: Frame) {
        if frame.op != op::SENSOR_READ {
            return self.error(ctx, ErrCode::UnknownOp);
        }
        let value = match ctx.device_mut() {
            Some(Device::GlucoseSensor { readings, last }) => {
                if let Some(v) = readings.pop_front() {
                    *last = v;
                }
                *last
            }
            _ => return self.error(ctx, ErrCode::BadRequest),
        };
        ctx.emit(EventKind::DeviceEffect, None, format!("glucose {value}"));
        self.reply(ctx, Frame::new(op::GLUCOSE, value.to_le_bytes().to_vec()));
    }

    fn pump(&mut self, ctx: &mut DomainCtx<'_>, frame: Frame) {
        let Some(Device::InsulinPump(pump)) = ctx.device_mut() else {
            return self.error(ctx, ErrCode::BadRequest);
        };
        let res = match frame.op {
            op::PUMP_UNLOCK if frame.payload.len() == 32 => {
                if frame.payload[..] == pump.expected_token() {
                    pump.unlocked = true;
                    pump.epoch += 1;
                    Ok(None)
                } else {
                    Err(ErrCode::AuthFailed)
                }
            }
            op::PUMP_DOSE if frame.payload.len() == 2 => {
                if !pump.unlocked {
                    Err(ErrCode::PumpLocked)
                } else {
                    let units = u16::from_le_bytes([frame.payload[0], frame.payload[1]]);
                    pump.unlocked = false;
                    pump.doses.push(units);
                    Ok(Some(units))
                }
            }
            op::PUMP_UNLOCK | op::PUMP_DOSE => Err(ErrCode::Malformed),
            _ => Err(ErrCode::UnknownOp),
        };
        match res {
            Ok(dose) => {
                if let Some(u) = dose {
                    ctx.emit(EventKind::DeviceEffect, None, format!("dose {u}"));
                }
                self.reply(ctx, Frame::ok());
            }
            Err(code) => self.error(ctx, code),
        }
    }

    fn track_storage_session(&mut self, ctx: &mut DomainCtx<'_>) {
        let m = marker(ctx, self.ports.ctrl_in);
        if self.storage.session != Some(m) {
            self.storage.session = Some(m);
            self.storage.authed = None;
            self.storage.write_pending = None;
            self.storage.data_rx.reset();
        }
    }

    fn storage_frame(&mut self, ctx: &mut DomainCtx<'_>, mb: MailboxId, frame: Frame) {
        let rm_op = matches!(frame.op, op::ALLOCATE | op::BIND | op::LOOKUP | op::STAGE | op::READ_BOOT);
        if rm_op {
            // Only honoured while the resource manager holds the control
            // mailbox by default.
            let st = ctx.status(self.ports.ctrl_in);
            if mb != self.ports.ctrl_in || st.owner != Some(DomainId::RESOURCE_MANAGER) || st.time_left != 0 {
                return self.error(ctx, ErrCode::Forbidden);
            }
            self.storage.authed = None;
            return self.storage_rm(ctx, frame);
        }
        if self.storage.client_disabled {
            return self.error(ctx, ErrCode::Disabled);
        }
        match frame.op {
            op::AUTH => self.storage_auth(ctx, &frame.payload),
            op::READ_BLOCKS | op::WRITE_BLOCKS => self.storage_io(ctx, frame),
            op::DATA if Some(mb) == self.ports.data_in => self.storage_data(ctx, &frame.payload),
            _ => self.error(ctx, ErrCode::UnknownOp),
        }
    }

    fn stream_image(&mut self, ctx: &mut DomainCtx<'_>, name: &str) -> Result<(), ErrCode> {
        let (entry, image) = match ctx.device() {
            Some(Device::Storage(drive)) => match drive.bootfs_entries() {
                None => return Err(ErrCode::BadMagic),
                Some(_) => (drive.bootfs_lookup(name), drive.bootfs_image(name)),
            },
            _ => return Err(ErrCode::BadRequest),
        };
        let (Some(entry), Some(image)) = (entry, image) else {
            return Err(ErrCode::NotFound);
        };
        let out = self.ports.bulk_out();
        let mut hdr = vec![name.len() as u8];
        hdr.extend_from_slice(name.as_bytes());
        hdr.extend_from_slice(&entry.length.to_le_bytes());
        hdr.extend_from_slice(entry.digest.as_bytes());
        self.push_out(ctx, out, Frame::new(op::IMAGE_HEADER, hdr));
        let slot = ctx.hw().mailbox(out).map(|m| m.config().msg_size).unwrap_or(64);
        for f in fragment(&image.bytes, slot) {
            self.push_out(ctx, out, f);
        }
        Ok(())
    }

    fn storage_rm(&mut self, ctx: &mut DomainCtx<'_>, frame: Frame) {
        let p = &frame.payload;
        let res: Result<Option<Frame>, ErrCode> = match frame.op {
            op::LOOKUP => {
                let name = String::from_utf8_lossy(p).into_owned();
                match ctx.device() {
                    Some(Device::Storage(drive)) => match drive.bootfs_entries() {
                        None => Err(ErrCode::BadMagic),
                        Some(es) => match es.into_iter().find(|e| e.name == name) {
                            Some(e) => {
                                let mut out = Vec::new();
                                protocol::put_u32(&mut out, e.offset);
                                protocol::put_u32(&mut out, e.length);
                                out.extend_from_slice(e.digest.as_bytes());
                                Ok(Some(Frame::new(op::ENTRY, out)))
                            }
                            None => Err(ErrCode::NotFound),
                        },
                    },
                    _ => Err(ErrCode::BadRequest),
                }
            }
            op::STAGE | op::READ_BOOT => {
                let name = String::from_utf8_lossy(p).into_owned();
                self.stream_image(ctx, &name).map(|_| Some(Frame::ok()))
            }
            op::ALLOCATE => self.allocate(ctx, p),
            op::BIND => match get_u16(p, 0) {
                Some(part) if p.len() == 2 => {
                    if self.storage.partitions.contains_key(&part) {
                        self.storage.bound = Some(part);
                        self.storage.client_disabled = false;
                        self.storage.authed = None;
                        ctx.emit(EventKind::StorageBound, None, format!("partition {part}"));
                        Ok(Some(Frame::ok()))
                    } else {
                        Err(ErrCode::UnknownPartition)
                    }
                }
                _ => Err(ErrCode::Malformed),
            },
            _ => Err(ErrCode::UnknownOp),
        };
        match res {
            Ok(Some(f)) => self.reply(ctx, f),
            Ok(None) => {}
            Err(code) => self.error(ctx, code),
        }
    }

    fn allocate(&mut self, ctx: &mut DomainCtx<'_>, p: &[u8]) -> Result<Option<Frame>, ErrCode> {
        if p.len() != 42 {
            return Err(ErrCode::Malformed);
        }
        let part = get_u16(p, 0).ok_or(ErrCode::Malformed)?;
        let first = get_u32(p, 2).ok_or(ErrCode::Malformed)?;
        let last = get_u32(p, 6).ok_or(ErrCode::Malformed)?;
        let credential: [u8; 32] = p[10..42].try_into().map_err(|_| ErrCode::Malformed)?;
        let geometry = &ctx.manifest().storage;
        if first > last || last >= geometry.blocks || first < geometry.boot_partition_blocks {
            return Err(ErrCode::Overlap);
        }
        let new = Partition { first, last, credential };
        if let Some(existing) = self.storage.partitions.get(&part) {
            return if *existing == new { Ok(Some(Frame::ok())) } else { Err(ErrCode::Overlap) };
        }
        if self.storage.partitions.values().any(|q| first <= q.last && q.first <= last) {
            return Err(ErrCode::Overlap);
        }
        self.storage.partitions.insert(part, new);
        ctx.emit(EventKind::StorageAllocated, None, format!("partition {part} blocks {first}..={last}"));
        Ok(Some(Frame::ok()))
    }

    fn storage_auth(&mut self, ctx: &mut DomainCtx<'_>, p: &[u8]) {
        let (Some(part), true) = (get_u16(p, 0), p.len() == 34) else {
            return self.error(ctx, ErrCode::Malformed);
        };
        let ok = self.storage.bound == Some(part)
            && self.storage.partitions.get(&part).is_some_and(|q| q.credential[..] == p[2..34]);
        if ok {
            self.storage.authed = Some(part);
            ctx.emit(EventKind::StorageAuth, None, format!("partition {part}"));
            self.reply(ctx, Frame::ok());
        } else {
            ctx.emit(EventKind::StorageAuth, None, format!("partition {part} refused"));
            self.error(ctx, ErrCode::AuthFailed);
        }
    }

    fn storage_io(&mut self, ctx: &mut DomainCtx<'_>, frame: Frame) {
        let p = &frame.payload;
        let (Some(rel), Some(count), true) = (get_u32(p, 0), get_u16(p, 4), p.len() == 6) else {
            return self.error(ctx, ErrCode::Malformed);
        };
        let Some(part) = self.storage.authed.and_then(|id| self.storage.partitions.get(&id).copied()) else {
            return self.error(ctx, ErrCode::NotAuthenticated);
        };
        if count == 0 || count > MAX_IO_BLOCKS || rel as u64 + count as u64 > part.blocks() as u64 {
            return self.error(ctx, ErrCode::OutOfPartition);
        }
        let abs = part.first + rel;
        if frame.op == op::WRITE_BLOCKS {
            self.storage.write_pending = Some((abs, count));
            self.storage.data_rx.reset();
            return;
        }
        let data = match ctx.device() {
            Some(Device::Storage(drive)) => drive.read(abs, count as u32).map(|d| d.to_vec()),
            _ => None,
        };
        let Some(data) = data else { return self.error(ctx, ErrCode::OutOfPartition) };
        ctx.emit(EventKind::StorageIo, None, format!("read {count} blocks at {abs}"));
        let out = self.ports.bulk_out();
        let slot = ctx.hw().mailbox(out).map(|m| m.config().msg_size).unwrap_or(64);
        for f in fragment(&data, slot) {
            self.push_out(ctx, out, f);
        }
        self.reply(ctx, Frame::ok());
    }

    fn storage_data(&mut self, ctx: &mut DomainCtx<'_>, payload: &[u8]) {
        let Some((abs, count)) = self.storage.write_pending else {
            return self.error(ctx, ErrCode::BadRequest);
        };
        let data = match self.storage.data_rx.push(payload) {
            Ok(Some(d)) => d,
            Ok(None) => return,
            Err(code) => {
                self.storage.write_pending = None;
                return self.error(ctx, code);
            }
        };
        self.storage.write_pending = None;
        let want = count as usize * BLOCK_SIZE;
        if data.len() > want {
            return self.error(ctx, ErrCode::OutOfPartition);
        }
        let mut buf = data;
        buf.resize(want, 0);
        if let Some(Device::Storage(drive)) = ctx.device_mut() {
            drive.write(abs, &buf);
        }
        ctx.emit(EventKind::StorageIo, None, format!("write {count} blocks at {abs}"));
        self.reply(ctx, Frame::ok());
    }

    fn device_work(&mut self, ctx: &mut DomainCtx<'_>, fifo: bool) {
        if self.phase == Phase::Disabled {
            return;
        }
        match self.kind {
            DeviceKind::SerialIn if self.pending_lines > 0 => {
                let line = match ctx.device_mut() {
                    Some(Device::SerialIn { input }) => input.pop_front(),
                    _ => None,
                };
                if let Some(mut line) = line {
                    self.pending_lines -= 1;
                    line.truncate(MAX_LINE);
                    ctx.emit(EventKind::DeviceEffect, None, format!("line {line:?}"));
                    self.reply(ctx, Frame::new(op::LINE, line.into_bytes()));
                }
            }
            DeviceKind::Network if fifo => {
                let rx = self.ports.bulk_out();
                let st = ctx.status(rx);
                let delegated = st.owner.is_some_and(|o| !o.is_rm());
                if !delegated || self.out.get(&rx).is_some_and(|q| !q.is_empty()) {
                    return;
                }
                let packet = match ctx.device_mut() {
                    Some(Device::Network(link)) => link.inbound.pop_front(),
                    _ => None,
                };
                if let Some(packet) = packet {
                    ctx.emit(EventKind::NetPacket, None, format!("in {} bytes", packet.len()));
                    let slot = ctx.hw().mailbox(rx).map(|m| m.config().msg_size).unwrap_or(64);
                    for f in fragment(&packet, slot) {
                        self.push_out(ctx, rx, f);
                    }
                }
            }
            _ => {}
        }
    }
}
