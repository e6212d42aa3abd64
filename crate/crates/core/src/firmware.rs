//! Programs installed in each domain and the two bootloaders.

use std::collections::BTreeSet;

use crate::attestation::BootImage;
use crate::io_services::{ports, IoService, Ports};
use crate::mailbox::DomainId;
use crate::manifest::{DeviceKind, DomainKind};
use crate::platform::{DomainCtx, Hardware, RunState};
use crate::protocol::{get_u32, op, Frame, Reassembler};
use crate::resource_manager::ResourceManager;
use crate::trace::EventKind;
use crate::untrusted_compat::UntrustedOs;

/// Receives an image streamed over the storage data plane:
/// an IMAGE_HEADER frame followed by DATA fragments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImageReceiver {
    name: Option<String>,
    length: u32,
    rx: Reassembler,
}

pub enum Received {
    Pending,
    Image(BootImage),
    Bad,
}

impl ImageReceiver {
    pub fn push(&mut self, frame: &Frame) -> Received {
        match frame.op {
            op::IMAGE_HEADER => {
                let p = &frame.payload;
                let Some(&n) = p.first() else { return Received::Bad };
                let n = n as usize;
                let (Some(name), Some(length)) = (p.get(1..1 + n), get_u32(p, 1 + n)) else {
                    return Received::Bad;
                };
                self.name = Some(String::from_utf8_lossy(name).into_owned());
                self.length = length;
                self.rx.reset();
                Received::Pending
            }
            op::DATA if self.name.is_some() => match self.rx.push(&frame.payload) {
                Ok(Some(bytes)) if bytes.len() == self.length as usize => {
                    Received::Image(BootImage::new(self.name.take().expect("checked"), bytes))
                }
                Ok(Some(_)) | Err(_) => Received::Bad,
                Ok(None) => Received::Pending,
            },
            _ => Received::Bad,
        }
    }
}

/// Bootloader of a domain reset without an installed image. Waits for the
/// resource manager to delegate the storage data plane, loads the image,
/// yields the mailbox and hands over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootLoader {
    data_out: crate::mailbox::MailboxId,
    rx: ImageReceiver,
}

impl BootLoader {
    pub fn run(&mut self, ctx: &mut DomainCtx<'_>) {
        let Ok(frame) = ctx.recv(self.data_out) else { return };
        let Ok(frame) = frame else { return };
        match self.rx.push(&frame) {
            Received::Pending => {}
            Received::Bad => {
                ctx.emit(EventKind::ServiceError, Some(self.data_out), "bad boot stream");
                self.rx = ImageReceiver::default();
            }
            Received::Image(img) => {
                let _ = ctx.yield_mailbox(self.data_out);
                let _ = ctx.install_image(img);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RmBootStep {
    Lookup,
    AwaitEntry,
    AwaitImage,
}

/// Resource-manager ROM bootloader: finds its image through the storage
/// service's boot filesystem and loads it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RmBoot {
    storage: Option<Ports>,
    step: RmBootStep,
    rx: ImageReceiver,
    failed: bool,
}

impl RmBoot {
    pub fn run(&mut self, ctx: &mut DomainCtx<'_>) {
        if self.failed {
            return;
        }
        let Some(p) = self.storage else { return };
        let name = ctx.spec().image.clone();
        match self.step {
            RmBootStep::Lookup => {
                if ctx.send(p.ctrl_in, &Frame::new(op::LOOKUP, name.as_bytes().to_vec())).is_ok() {
                    self.step = RmBootStep::AwaitEntry;
                }
            }
            RmBootStep::AwaitEntry => match ctx.recv(p.reply) {
                Ok(Ok(f)) if f.op == op::ENTRY => {
                    if ctx.send(p.ctrl_in, &Frame::new(op::READ_BOOT, name.as_bytes().to_vec())).is_ok() {
                        self.step = RmBootStep::AwaitImage;
                    }
                }
                Ok(_) => self.fail(ctx, &name),
                Err(_) => {}
            },
            RmBootStep::AwaitImage => {
                // Drain the OK acknowledging the read.
                if let Ok(Ok(f)) = ctx.recv(p.reply) {
                    if f.op != op::OK {
                        return self.fail(ctx, &name);
                    }
                }
                if let Ok(Ok(frame)) = ctx.recv(p.bulk_out()) {
                    match self.rx.push(&frame) {
                        Received::Pending => {}
                        Received::Bad => self.fail(ctx, &name),
                        Received::Image(img) => {
                            let _ = ctx.install_image(img);
                        }
                    }
                }
            }
        }
    }

    fn fail(&mut self, ctx: &mut DomainCtx<'_>, name: &str) {
        self.failed = true;
        ctx.emit(EventKind::BootAborted, None, name.to_string());
        ctx.set_boot_status(crate::platform::BootStatus::Aborted(name.to_string()));
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Firmware {
    /// Domain held in reset, or a TEE whose program is driven from the host.
    Held,
    BootRecv(BootLoader),
    RmBoot(RmBoot),
    Rm(Box<ResourceManager>),
    Service(Box<IoService>),
    /// TEE program; its work happens through [`crate::platform::Machine::act`].
    Tee,
    Untrusted(Box<UntrustedOs>),
}

impl Firmware {
    pub fn rm_boot(storage: Option<Ports>) -> Firmware {
        Firmware::RmBoot(RmBoot { storage, step: RmBootStep::Lookup, rx: ImageReceiver::default(), failed: false })
    }

    /// Program matching the domain's current run state.
    pub fn for_domain(hw: &Hardware, id: DomainId) -> Firmware {
        let Some(d) = hw.domain(id) else { return Firmware::Held };
        let manifest = hw.manifest();
        let storage = manifest.device_domain(DeviceKind::Storage).and_then(|s| ports(manifest, s));
        match d.run {
            RunState::HeldInReset => Firmware::Held,
            RunState::Booting if id.is_rm() => Firmware::rm_boot(storage),
            RunState::Booting => match storage {
                Some(p) => Firmware::BootRecv(BootLoader { data_out: p.bulk_out(), rx: ImageReceiver::default() }),
                None => Firmware::Held,
            },
            RunState::Running => match d.spec.kind {
                DomainKind::ResourceManager => {
                    let running: BTreeSet<DomainId> = hw
                        .domain_ids()
                        .into_iter()
                        .filter(|&o| hw.domain(o).is_some_and(|x| x.run == RunState::Running))
                        .collect();
                    Firmware::Rm(Box::new(ResourceManager::new(manifest, &running)))
                }
                DomainKind::Io(kind) => match ports(manifest, id) {
                    Some(p) => Firmware::Service(Box::new(IoService::new(kind, p))),
                    None => Firmware::Held,
                },
                DomainKind::Tee => Firmware::Tee,
                DomainKind::Untrusted => Firmware::Untrusted(Box::new(UntrustedOs::new(hw.workload.clone()))),
            },
        }
    }

    pub fn run(&mut self, ctx: &mut DomainCtx<'_>) {
        match self {
            Firmware::Held | Firmware::Tee => {}
            Firmware::BootRecv(b) => b.run(ctx),
            Firmware::RmBoot(b) => b.run(ctx),
            Firmware::Rm(rm) => rm.run(ctx),
            Firmware::Service(s) => s.run(ctx),
            Firmware::Untrusted(u) => u.run(ctx),
        }
    }

    pub fn as_rm(&self) -> Option<&ResourceManager> {
        match self {
            Firmware::Rm(rm) => Some(rm),
            _ => None,
        }
    }

    pub fn as_service(&self) -> Option<&IoService> {
        match self {
            Firmware::Service(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_untrusted_mut(&mut self) -> Option<&mut UntrustedOs> {
        match self {
            Firmware::Untrusted(u) => Some(u),
            _ => None,
        }
    }

    pub fn as_untrusted(&self) -> Option<&UntrustedOs> {
        match self {
            Firmware::Untrusted(u) => Some(u),
            _ => None,
        }
    }
}
