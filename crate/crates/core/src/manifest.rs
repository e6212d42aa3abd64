//! Machine manifest: the static wiring of domains, mailboxes, permanent
//! queues and arbiters, plus the boot images and resource-manager policy.
//!
//! The JSON layout is described in `schemas/manifest.schema.json`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attestation::{BootImage, DeviceKey, MAX_PCRS};
use crate::crypto::{self, Digest};
use crate::mailbox::{DomainId, FixedRole, MailboxConfig, MailboxId};
use crate::platform::PlatformError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    SerialIn,
    SerialOut,
    Storage,
    Network,
    GlucoseSensor,
    InsulinPump,
}

impl DeviceKind {
    /// Restricted devices are partitioned by the resource manager and are
    /// not reset between clients.
    pub fn is_restricted(self) -> bool {
        self == DeviceKind::Storage
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    ResourceManager,
    Tee,
    Io(DeviceKind),
    Untrusted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: DomainId,
    pub name: String,
    pub kind: DomainKind,
    pub memory_size: usize,
    /// Physical base address, used only for DMA addressing.
    pub mem_base: u64,
    pub pcr_index: u8,
    pub image: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    Control,
    Data,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MailboxSpec {
    #[serde(flatten)]
    pub config: MailboxConfig,
    pub plane: Plane,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Domain(DomainId),
    Tpm,
}

impl Serialize for Endpoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Endpoint::Domain(d) => s.serialize_u8(d.0),
            Endpoint::Tpm => s.serialize_str("tpm"),
        }
    }
}

impl<'de> Deserialize<'de> for Endpoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u8),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Endpoint::Domain(DomainId(n))),
            Raw::S(s) if s == "tpm" => Ok(Endpoint::Tpm),
            Raw::S(s) => Err(serde::de::Error::custom(format!("bad endpoint {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSpec {
    pub id: u16,
    pub endpoints: [Endpoint; 2],
    pub depth: usize,
    pub msg_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddrRange {
    pub start: u64,
    pub len: u64,
}

impl AddrRange {
    pub fn end(&self) -> u64 {
        self.start + self.len
    }

    pub fn contains_range(&self, start: u64, len: u64) -> bool {
        start >= self.start && start.checked_add(len).is_some_and(|e| e <= self.end())
    }

    pub fn overlaps(&self, other: &AddrRange) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArbiterSpec {
    pub io_domain: DomainId,
    pub data_mailbox: MailboxId,
    pub dma_window: AddrRange,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageBinding {
    /// Image name of the program the partition belongs to.
    pub image: String,
    pub partition: u16,
    pub first_block: u32,
    pub last_block: u32,
    pub credential: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub max_msgs: u32,
    pub max_time: u64,
    #[serde(default)]
    pub storage_bindings: Vec<StorageBinding>,
}

impl Default for Policy {
    fn default() -> Self {
        Policy { max_msgs: 65536, max_time: 10_000, storage_bindings: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageGeometry {
    pub blocks: u32,
    pub boot_partition_blocks: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineManifest {
    pub domains: Vec<DomainSpec>,
    pub mailboxes: Vec<MailboxSpec>,
    pub queues: Vec<QueueSpec>,
    pub arbiters: Vec<ArbiterSpec>,
    pub images: Vec<BootImage>,
    #[serde(default)]
    pub policy: Policy,
    pub storage: StorageGeometry,
    #[serde(with = "hex_key")]
    pub device_key: DeviceKey,
}

mod hex_key {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s)
            .map_err(serde::de::Error::custom)?
            .try_into()
            .map_err(|_| serde::de::Error::custom("device key must be 32 bytes"))
    }
}

pub const RM: DomainId = DomainId(0);
pub const TEE1: DomainId = DomainId(1);
pub const TEE2: DomainId = DomainId(2);
pub const SERIAL_IN: DomainId = DomainId(3);
pub const SERIAL_OUT: DomainId = DomainId(4);
pub const STORAGE: DomainId = DomainId(5);
pub const NETWORK: DomainId = DomainId(6);
pub const UNTRUSTED: DomainId = DomainId(7);
pub const GLUCOSE_SENSOR: DomainId = DomainId(8);
pub const INSULIN_PUMP: DomainId = DomainId(9);

pub const CONTROL_DEPTH: usize = 4;
pub const CONTROL_MSG: usize = 64;
pub const DATA_DEPTH: usize = 4;
pub const DATA_MSG: usize = 512;

pub const UNTRUSTED_BASE: u64 = 0x8000_0000;
pub const UNTRUSTED_MEM: usize = 256 * 1024;
pub const MCU_MEM: usize = 16 * 1024;

/// Storage partitions of the insulin program and of the untrusted domain.
pub const INSULIN_PARTITION: u16 = 1;
pub const UNTRUSTED_PARTITION: u16 = 2;

/// Deterministic synthetic program bytes for a named image.
pub fn synthetic_image(name: &str, len: usize) -> BootImage {
    let mut bytes = Vec::with_capacity(len + 32);
    let mut counter = 0u32;
    while bytes.len() < len {
        let block = crypto::hash_parts(&[b"image:", name.as_bytes(), &counter.to_le_bytes()]);
        bytes.extend_from_slice(block.as_bytes());
        counter += 1;
    }
    bytes.truncate(len);
    BootImage::new(name, bytes)
}

/// Credential a program derives for its storage partition.
pub fn program_credential(image: &str) -> Digest {
    crypto::hash_parts(&[b"storage-credential:", image.as_bytes()])
}

fn mailbox(
    id: u16,
    name: &str,
    fixed_end: DomainId,
    fixed_role: FixedRole,
    wired: &[DomainId],
    plane: Plane,
) -> MailboxSpec {
    let (depth, msg_size) = match plane {
        Plane::Control => (CONTROL_DEPTH, CONTROL_MSG),
        Plane::Data => (DATA_DEPTH, DATA_MSG),
    };
    MailboxSpec {
        config: MailboxConfig {
            id: MailboxId(id),
            name: name.to_string(),
            fixed_end,
            fixed_role,
            wired_delegates: wired.iter().copied().collect(),
            depth,
            msg_size,
        },
        plane,
    }
}

fn mcu(id: DomainId, name: &str, kind: DomainKind, image: &str) -> DomainSpec {
    DomainSpec {
        id,
        name: name.to_string(),
        kind,
        memory_size: MCU_MEM,
        mem_base: 0x1000_0000 + (id.0 as u64) * 0x0010_0000,
        pcr_index: id.0,
        image: image.to_string(),
    }
}

impl MachineManifest {
    /// The prototype roster: resource manager, two TEEs, four I/O domains
    /// and the untrusted domain; 12 mailboxes and 11 permanent queues.
    pub fn default_machine() -> Self {
        use FixedRole::*;
        use Plane::*;
        let domains = vec![
            mcu(RM, "rmanager", DomainKind::ResourceManager, "rmanager"),
            mcu(TEE1, "tee1", DomainKind::Tee, "bankapp"),
            mcu(TEE2, "tee2", DomainKind::Tee, "pumpapp"),
            mcu(SERIAL_IN, "serial-in", DomainKind::Io(DeviceKind::SerialIn), "serial-in"),
            mcu(SERIAL_OUT, "serial-out", DomainKind::Io(DeviceKind::SerialOut), "serial-out"),
            mcu(STORAGE, "storage", DomainKind::Io(DeviceKind::Storage), "storage"),
            mcu(NETWORK, "network", DomainKind::Io(DeviceKind::Network), "network"),
            DomainSpec {
                id: UNTRUSTED,
                name: "untrusted".into(),
                kind: DomainKind::Untrusted,
                memory_size: UNTRUSTED_MEM,
                mem_base: UNTRUSTED_BASE,
                pcr_index: UNTRUSTED.0,
                image: "untrusted-os".into(),
            },
        ];
        let clients = [RM, TEE1, TEE2, UNTRUSTED];
        let everyone_but_storage = [RM, TEE1, TEE2, SERIAL_IN, SERIAL_OUT, NETWORK, UNTRUSTED];
        let mailboxes = vec![
            mailbox(0, "serial-in.req", SERIAL_IN, FixedReader, &clients, Control),
            mailbox(1, "serial-in.resp", SERIAL_IN, FixedWriter, &clients, Control),
            mailbox(2, "serial-out.req", SERIAL_OUT, FixedReader, &clients, Data),
            mailbox(3, "serial-out.resp", SERIAL_OUT, FixedWriter, &clients, Control),
            mailbox(4, "storage.ctrl-req", STORAGE, FixedReader, &clients, Control),
            mailbox(5, "storage.ctrl-resp", STORAGE, FixedWriter, &clients, Control),
            mailbox(6, "storage.data-in", STORAGE, FixedReader, &clients, Data),
            mailbox(7, "storage.data-out", STORAGE, FixedWriter, &everyone_but_storage, Data),
            mailbox(8, "network.tx", NETWORK, FixedReader, &clients, Data),
            mailbox(9, "network.rx", NETWORK, FixedWriter, &clients, Data),
            mailbox(10, "ipc.tee1-to-tee2", TEE2, FixedReader, &[RM, TEE1], Data),
            mailbox(11, "ipc.tee2-to-tee1", TEE1, FixedReader, &[RM, TEE2], Data),
        ];
        let mut queues: Vec<QueueSpec> = domains
            .iter()
            .enumerate()
            .map(|(i, d)| QueueSpec {
                id: i as u16,
                endpoints: [Endpoint::Domain(d.id), Endpoint::Tpm],
                depth: 4,
                msg_size: 512,
            })
            .collect();
        for (i, peer) in [TEE1, TEE2, UNTRUSTED].into_iter().enumerate() {
            queues.push(QueueSpec {
                id: (domains.len() + i) as u16,
                endpoints: [Endpoint::Domain(RM), Endpoint::Domain(peer)],
                depth: 4,
                msg_size: CONTROL_MSG,
            });
        }
        let images = [
            ("rmanager", 2600),
            ("bankapp", 1900),
            ("pumpapp", 2100),
            ("serial-in", 1100),
            ("serial-out", 1200),
            ("storage", 2400),
            ("network", 2300),
            ("untrusted-os", 3000),
        ]
        .iter()
        .map(|(n, l)| synthetic_image(n, *l))
        .collect();
        let policy = Policy {
            storage_bindings: vec![
                StorageBinding {
                    image: "pumpapp".into(),
                    partition: INSULIN_PARTITION,
                    first_block: 100,
                    last_block: 199,
                    credential: program_credential("pumpapp"),
                },
                StorageBinding {
                    image: "bankapp".into(),
                    partition: 3,
                    first_block: 300,
                    last_block: 349,
                    credential: program_credential("bankapp"),
                },
                StorageBinding {
                    image: "untrusted-os".into(),
                    partition: UNTRUSTED_PARTITION,
                    first_block: 200,
                    last_block: 299,
                    credential: program_credential("untrusted-os"),
                },
            ],
            ..Policy::default()
        };
        MachineManifest {
            domains,
            mailboxes,
            queues,
            arbiters: vec![ArbiterSpec {
                io_domain: NETWORK,
                data_mailbox: MailboxId(8),
                dma_window: AddrRange { start: UNTRUSTED_BASE + 0x1_0000, len: 0x1_0000 },
            }],
            images,
            policy,
            storage: StorageGeometry { blocks: 512, boot_partition_blocks: 64 },
            device_key: crypto::hash(b"split-trust device key").0,
        }
    }

    /// Default roster plus a glucose sensor and an insulin pump domain.
    pub fn with_medical_devices() -> Self {
        use FixedRole::*;
        let mut m = Self::default_machine();
        m.domains.push(mcu(GLUCOSE_SENSOR, "glucose-sensor", DomainKind::Io(DeviceKind::GlucoseSensor), "glucose"));
        m.domains.push(mcu(INSULIN_PUMP, "insulin-pump", DomainKind::Io(DeviceKind::InsulinPump), "pump"));
        let clients = [RM, TEE1, TEE2, UNTRUSTED];
        m.mailboxes.push(mailbox(12, "glucose.req", GLUCOSE_SENSOR, FixedReader, &clients, Plane::Control));
        m.mailboxes.push(mailbox(13, "glucose.resp", GLUCOSE_SENSOR, FixedWriter, &clients, Plane::Control));
        m.mailboxes.push(mailbox(14, "pump.req", INSULIN_PUMP, FixedReader, &clients, Plane::Control));
        m.mailboxes.push(mailbox(15, "pump.resp", INSULIN_PUMP, FixedWriter, &clients, Plane::Control));
        for mb in m.mailboxes.iter_mut() {
            if mb.config.id == MailboxId(7) {
                mb.config.wired_delegates.extend([GLUCOSE_SENSOR, INSULIN_PUMP]);
            }
        }
        let next = m.queues.len() as u16;
        for (i, d) in [GLUCOSE_SENSOR, INSULIN_PUMP].into_iter().enumerate() {
            m.queues.push(QueueSpec {
                id: next + i as u16,
                endpoints: [Endpoint::Domain(d), Endpoint::Tpm],
                depth: 4,
                msg_size: 512,
            });
        }
        m.images.push(synthetic_image("glucose", 900));
        m.images.push(synthetic_image("pump", 950));
        m
    }

    pub fn domain(&self, id: DomainId) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn image(&self, name: &str) -> Option<&BootImage> {
        self.images.iter().find(|i| i.name == name)
    }

    pub fn untrusted(&self) -> Option<DomainId> {
        self.domains.iter().find(|d| d.kind == DomainKind::Untrusted).map(|d| d.id)
    }

    pub fn domain_of_kind(&self, kind: DomainKind) -> Option<DomainId> {
        self.domains.iter().find(|d| d.kind == kind).map(|d| d.id)
    }

    pub fn device_domain(&self, dev: DeviceKind) -> Option<DomainId> {
        self.domain_of_kind(DomainKind::Io(dev))
    }

    /// Checks every structural constraint; the error names the first one
    /// violated.
    pub fn validate(&self) -> Result<(), PlatformError> {
        let bad = |s: String| Err(PlatformError::InvalidManifest(s));
        let mut ids = BTreeSet::new();
        let mut pcrs = BTreeSet::new();
        for d in &self.domains {
            if !ids.insert(d.id) {
                return bad(format!("duplicate domain id {}", d.id));
            }
            if !pcrs.insert(d.pcr_index) {
                return bad(format!("duplicate pcr index {}", d.pcr_index));
            }
            if d.pcr_index as usize >= MAX_PCRS {
                return bad(format!("pcr index {} out of range", d.pcr_index));
            }
            if d.memory_size == 0 {
                return bad(format!("domain {} has no memory", d.id));
            }
        }
        let count = |k: DomainKind| self.domains.iter().filter(|d| d.kind == k).count();
        if count(DomainKind::ResourceManager) != 1 {
            return bad("exactly one resource manager domain required".into());
        }
        if count(DomainKind::Untrusted) != 1 {
            return bad("exactly one untrusted domain required".into());
        }
        if self.domain(DomainId::RESOURCE_MANAGER).map(|d| d.kind) != Some(DomainKind::ResourceManager) {
            return bad("resource manager must have domain id 0".into());
        }
        let mut devices = BTreeSet::new();
        for d in &self.domains {
            if let DomainKind::Io(dev) = d.kind {
                if !devices.insert(dev) {
                    return bad(format!("device {dev:?} assigned to two domains"));
                }
            }
        }
        if !devices.contains(&DeviceKind::Storage) {
            return bad("a storage domain is required for boot".into());
        }
        for (i, a) in self.domains.iter().enumerate() {
            let ra = AddrRange { start: a.mem_base, len: a.memory_size as u64 };
            for b in &self.domains[i + 1..] {
                let rb = AddrRange { start: b.mem_base, len: b.memory_size as u64 };
                if ra.overlaps(&rb) {
                    return bad(format!("memory of domains {} and {} overlaps", a.id, b.id));
                }
            }
        }
        let mut mb_ids = BTreeSet::new();
        for mb in &self.mailboxes {
            let c = &mb.config;
            if !mb_ids.insert(c.id) {
                return bad(format!("duplicate mailbox id {}", c.id));
            }
            if !ids.contains(&c.fixed_end) {
                return bad(format!("mailbox {} fixed end {} is not declared", c.id, c.fixed_end));
            }
            if let Some(w) = c.wired_delegates.iter().find(|w| !ids.contains(w)) {
                return bad(format!("mailbox {} wired to undeclared domain {}", c.id, w));
            }
            if let Err(e) = c.validate() {
                return bad(e.to_string());
            }
        }
        let mut q_ids = BTreeSet::new();
        for q in &self.queues {
            if !q_ids.insert(q.id) {
                return bad(format!("duplicate queue id {}", q.id));
            }
            for e in q.endpoints {
                if let Endpoint::Domain(d) = e {
                    if !ids.contains(&d) {
                        return bad(format!("queue {} references undeclared domain {}", q.id, d));
                    }
                }
            }
            if q.endpoints[0] == q.endpoints[1] || q.depth == 0 || q.msg_size == 0 {
                return bad(format!("queue {} is malformed", q.id));
            }
        }
        let untrusted = self.untrusted().expect("checked above");
        let u = self.domain(untrusted).expect("declared");
        let u_range = AddrRange { start: u.mem_base, len: u.memory_size as u64 };
        for a in &self.arbiters {
            match self.domain(a.io_domain).map(|d| d.kind) {
                Some(DomainKind::Io(_)) => {}
                _ => return bad(format!("arbiter domain {} is not an I/O domain", a.io_domain)),
            }
            let Some(mb) = self.mailboxes.iter().find(|m| m.config.id == a.data_mailbox) else {
                return bad(format!("arbiter mailbox {} is not declared", a.data_mailbox));
            };
            if mb.config.fixed_end != a.io_domain {
                return bad(format!("arbiter mailbox {} does not belong to domain {}", a.data_mailbox, a.io_domain));
            }
            if !u_range.contains_range(a.dma_window.start, a.dma_window.len) {
                return bad("dma window is not inside untrusted memory".into());
            }
        }
        let mut names = BTreeSet::new();
        for img in &self.images {
            if !img.name_is_valid() {
                return bad(format!("image name {:?} invalid", img.name));
            }
            if !names.insert(img.name.clone()) {
                return bad(format!("duplicate image {:?}", img.name));
            }
        }
        if self.storage.boot_partition_blocks >= self.storage.blocks {
            return bad("boot partition larger than drive".into());
        }
        let mut parts: BTreeMap<u16, (u32, u32)> = BTreeMap::new();
        for b in &self.policy.storage_bindings {
            if b.partition == 0 || b.first_block > b.last_block || b.last_block >= self.storage.blocks {
                return bad(format!("storage binding for {:?} is malformed", b.image));
            }
            if b.first_block < self.storage.boot_partition_blocks {
                return bad(format!("storage binding for {:?} overlaps the boot partition", b.image));
            }
            parts.insert(b.partition, (b.first_block, b.last_block));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roster_matches_prototype() {
        let m = MachineManifest::default_machine();
        m.validate().unwrap();
        assert_eq!(m.domains.len(), 8);
        assert_eq!(m.mailboxes.len(), 12);
        assert_eq!(m.queues.len(), 11);
        let tees = m.domains.iter().filter(|d| d.kind == DomainKind::Tee).count();
        let ios = m.domains.iter().filter(|d| matches!(d.kind, DomainKind::Io(_))).count();
        assert_eq!((tees, ios), (2, 4));
        let control = m.mailboxes.iter().filter(|mb| mb.plane == Plane::Control);
        assert!(control.clone().all(|mb| mb.config.depth == 4 && mb.config.msg_size == 64));
        let data = m.mailboxes.iter().filter(|mb| mb.plane == Plane::Data);
        assert!(data.clone().all(|mb| mb.config.depth == 4 && mb.config.msg_size == 512));
        let storage = m.mailboxes.iter().filter(|mb| mb.config.fixed_end == STORAGE).count();
        assert_eq!(storage, 4);
    }

    #[test]
    fn json_round_trip() {
        let m = MachineManifest::with_medical_devices();
        m.validate().unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: MachineManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_two_untrusted_domains() {
        let mut m = MachineManifest::default_machine();
        let mut extra = m.domains[7].clone();
        extra.id = DomainId(20);
        extra.pcr_index = 20;
        extra.mem_base = 0x9000_0000;
        m.domains.push(extra);
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("exactly one untrusted"), "{err}");
    }

    #[test]
    fn rejects_undeclared_wiring() {
        let mut m = MachineManifest::default_machine();
        m.mailboxes[0].config.wired_delegates.insert(DomainId(42));
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("undeclared domain 42"), "{err}");
    }

    #[test]
    fn rejects_dma_window_outside_untrusted_memory() {
        let mut m = MachineManifest::default_machine();
        m.arbiters[0].dma_window = AddrRange { start: 0x1010_0000, len: 16 };
        assert!(m.validate().is_err());
    }
}
