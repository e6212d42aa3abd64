//! Physical devices behind the I/O domains. Device state survives domain
//! resets; only the service program's memory is cleared.

use std::collections::VecDeque;

use crate::attestation::{BootImage, Digest};
use crate::peers::Responder;

pub const BLOCK_SIZE: usize = 512;
pub const BOOTFS_MAGIC: &[u8; 4] = b"STFS";
pub const BOOTFS_TABLE_BLOCKS: u32 = 2;
pub const BOOTFS_ENTRY: usize = 64;
pub const BOOTFS_NAME: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootfsEntry {
    pub name: String,
    pub offset: u32,
    pub length: u32,
    pub digest: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StorageDrive {
    blocks: Vec<u8>,
}

impl StorageDrive {
    pub fn new(block_count: u32) -> Self {
        StorageDrive { blocks: vec![0; block_count as usize * BLOCK_SIZE] }
    }

    pub fn block_count(&self) -> u32 {
        (self.blocks.len() / BLOCK_SIZE) as u32
    }

    pub fn read(&self, block: u32, count: u32) -> Option<&[u8]> {
        let start = block as usize * BLOCK_SIZE;
        let end = start + count as usize * BLOCK_SIZE;
        self.blocks.get(start..end)
    }

    pub fn write(&mut self, block: u32, data: &[u8]) -> bool {
        let start = block as usize * BLOCK_SIZE;
        match self.blocks.get_mut(start..start + data.len()) {
            Some(dst) => {
                dst.copy_from_slice(data);
                true
            }
            None => false,
        }
    }

    pub fn bytes(&self, offset: usize, len: usize) -> Option<&[u8]> {
        self.blocks.get(offset..offset + len)
    }

    pub fn bytes_mut(&mut self, offset: usize, len: usize) -> Option<&mut [u8]> {
        self.blocks.get_mut(offset..offset + len)
    }

    /// Writes a boot filesystem holding `images` into the boot partition.
    /// Returns the names that did not fit.
    pub fn format_bootfs(&mut self, images: &[BootImage], partition_blocks: u32) -> Vec<String> {
        let mut table = Vec::with_capacity(BOOTFS_TABLE_BLOCKS as usize * BLOCK_SIZE);
        table.extend_from_slice(BOOTFS_MAGIC);
        let mut next_block = BOOTFS_TABLE_BLOCKS;
        let max_entries = (BOOTFS_TABLE_BLOCKS as usize * BLOCK_SIZE - 8) / BOOTFS_ENTRY;
        let mut skipped = Vec::new();
        let mut entries = Vec::new();
        for img in images {
            let blocks = img.bytes.len().div_ceil(BLOCK_SIZE) as u32;
            if entries.len() == max_entries || next_block + blocks > partition_blocks || !img.name_is_valid() {
                skipped.push(img.name.clone());
                continue;
            }
            let offset = next_block;
            self.write(next_block, &img.bytes);
            entries.push(BootfsEntry {
                name: img.name.clone(),
                offset,
                length: img.bytes.len() as u32,
                digest: img.digest(),
            });
            next_block += blocks;
        }
        table.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in &entries {
            let mut name = [0u8; BOOTFS_NAME];
            name[..e.name.len()].copy_from_slice(e.name.as_bytes());
            table.extend_from_slice(&name);
            table.extend_from_slice(&e.offset.to_le_bytes());
            table.extend_from_slice(&e.length.to_le_bytes());
            table.extend_from_slice(e.digest.as_bytes());
            table.extend_from_slice(&[0u8; 8]);
        }
        table.resize(BOOTFS_TABLE_BLOCKS as usize * BLOCK_SIZE, 0);
        self.write(0, &table);
        skipped
    }

    /// Parses the boot filesystem table. `None` if the magic is wrong.
    pub fn bootfs_entries(&self) -> Option<Vec<BootfsEntry>> {
        let table = self.read(0, BOOTFS_TABLE_BLOCKS)?;
        if &table[..4] != BOOTFS_MAGIC {
            return None;
        }
        let n = u32::from_le_bytes(table[4..8].try_into().ok()?) as usize;
        let max = (table.len() - 8) / BOOTFS_ENTRY;
        let mut out = Vec::new();
        for i in 0..n.min(max) {
            let e = &table[8 + i * BOOTFS_ENTRY..8 + (i + 1) * BOOTFS_ENTRY];
            let name_end = e[..BOOTFS_NAME].iter().position(|&b| b == 0).unwrap_or(BOOTFS_NAME);
            out.push(BootfsEntry {
                name: String::from_utf8_lossy(&e[..name_end]).into_owned(),
                offset: u32::from_le_bytes(e[16..20].try_into().ok()?),
                length: u32::from_le_bytes(e[20..24].try_into().ok()?),
                digest: Digest::from_slice(&e[24..56])?,
            });
        }
        Some(out)
    }

    pub fn bootfs_lookup(&self, name: &str) -> Option<BootfsEntry> {
        self.bootfs_entries()?.into_iter().find(|e| e.name == name)
    }

    /// Image bytes as stored, which need not match the table digest.
    pub fn bootfs_image(&self, name: &str) -> Option<BootImage> {
        let e = self.bootfs_lookup(name)?;
        let bytes = self.bytes(e.offset as usize * BLOCK_SIZE, e.length as usize)?.to_vec();
        Some(BootImage::new(name, bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetLink {
    pub down: bool,
    /// Packets that left the machine, in order.
    pub sent: Vec<Vec<u8>>,
    /// Packets waiting to be picked up by the network service or DMA.
    pub inbound: VecDeque<Vec<u8>>,
    pub responder: Responder,
}

impl NetLink {
    pub fn new(responder: Responder) -> Self {
        NetLink { down: false, sent: Vec::new(), inbound: VecDeque::new(), responder }
    }

    pub fn transmit(&mut self, packet: Vec<u8>) -> bool {
        if self.down {
            return false;
        }
        let replies = self.responder.respond(&packet);
        self.sent.push(packet);
        self.inbound.extend(replies);
        true
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Device {
    SerialIn { input: VecDeque<String> },
    /// Everything written to the terminal, one entry per PRINT.
    SerialOut { output: Vec<String> },
    Storage(StorageDrive),
    Network(NetLink),
    GlucoseSensor { readings: VecDeque<u16>, last: u16 },
    InsulinPump(Pump),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pump {
    pub provider_key: [u8; 32],
    pub epoch: u32,
    pub unlocked: bool,
    pub doses: Vec<u16>,
}

impl Pump {
    pub fn new(provider_key: [u8; 32]) -> Self {
        Pump { provider_key, epoch: 0, unlocked: false, doses: Vec::new() }
    }

    pub fn expected_token(&self) -> [u8; 32] {
        unlock_token(&self.provider_key, self.epoch)
    }
}

/// Token the health provider issues to unlock the pump for one dose.
pub fn unlock_token(provider_key: &[u8; 32], epoch: u32) -> [u8; 32] {
    crate::crypto::mac_parts(provider_key, &[b"pump-unlock", &epoch.to_le_bytes()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::synthetic_image;

    #[test]
    fn bootfs_round_trip() {
        let imgs = vec![synthetic_image("a", 700), synthetic_image("storage", 1500)];
        let mut d = StorageDrive::new(512);
        assert!(d.format_bootfs(&imgs, 64).is_empty());
        let es = d.bootfs_entries().unwrap();
        assert_eq!(es.len(), 2);
        assert_eq!(es[0].offset, 2);
        // 700 bytes round up to two blocks.
        assert_eq!(es[1].offset, 4);
        assert_eq!(d.bootfs_image("storage").unwrap(), imgs[1]);
        assert_eq!(es[1].digest, imgs[1].digest());
        assert!(d.bootfs_lookup("missing").is_none());
    }

    #[test]
    fn bootfs_skips_images_beyond_partition() {
        let imgs = vec![synthetic_image("big", 64 * 512)];
        let mut d = StorageDrive::new(512);
        assert_eq!(d.format_bootfs(&imgs, 64), vec!["big".to_string()]);
    }

    #[test]
    fn blank_drive_has_no_bootfs() {
        assert!(StorageDrive::new(8).bootfs_entries().is_none());
    }

    #[test]
    fn link_down_drops_packets() {
        let mut l = NetLink::new(Responder::Loopback);
        assert!(l.transmit(b"x".to_vec()));
        assert_eq!(l.inbound.pop_front().unwrap(), b"x");
        l.down = true;
        assert!(!l.transmit(b"y".to_vec()));
        assert_eq!(l.sent.len(), 1);
    }
}
