//! TPM root of trust: per-domain PCRs, quotes, boot measurement and the
//! mediator that multiplexes domain requests onto the TPM.
//!
//! Quotes are authenticated with HMAC-SHA256 under a symmetric device key
//! shared with the verifier. A quote covers
//! `nonce(16) || selection mask (u32 LE) || selected PCR values`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::crypto::Digest;
use crate::crypto::{self, KEY_LEN, TAG_LEN};

/// Extended into a service's PCR before it processes its first message
/// after reset.
pub const FRESHNESS_CONST: Digest = Digest([0xF5; 32]);

pub const NONCE_LEN: usize = 16;
pub const MAX_PCRS: usize = 32;
pub const MAX_IMAGE_NAME: usize = 16;

pub type Nonce = [u8; NONCE_LEN];
pub type DeviceKey = [u8; KEY_LEN];

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttestError {
    #[error("PCR index {0} out of range")]
    BadIndex(u8),
    #[error("quote selection is empty")]
    EmptySelection,
    #[error("image {0:?} missing")]
    ImageMissing(String),
    #[error("domain may only extend its own PCR")]
    ForbiddenExtend,
    #[error("malformed TPM request")]
    Malformed,
}

/// `new = H(old || measurement)`.
pub fn extend_value(old: &Digest, measurement: &Digest) -> Digest {
    crypto::hash_parts(&[old.as_bytes(), measurement.as_bytes()])
}

/// PCR value right after the bootloader measured `image`.
pub fn boot_pcr(image_digest: &Digest) -> Digest {
    extend_value(&Digest::ZERO, image_digest)
}

/// PCR value of a service that has processed at least one message since boot.
pub fn used_pcr(image_digest: &Digest) -> Digest {
    extend_value(&boot_pcr(image_digest), &FRESHNESS_CONST)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PcrBank {
    regs: Vec<Digest>,
}

impl PcrBank {
    pub fn new(count: usize) -> Self {
        assert!(count <= MAX_PCRS, "at most {MAX_PCRS} PCRs");
        PcrBank { regs: vec![Digest::ZERO; count] }
    }

    pub fn len(&self) -> usize {
        self.regs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regs.is_empty()
    }

    pub fn get(&self, index: u8) -> Result<Digest, AttestError> {
        self.regs.get(index as usize).copied().ok_or(AttestError::BadIndex(index))
    }

    pub fn extend(&mut self, index: u8, measurement: &Digest) -> Result<Digest, AttestError> {
        let reg = self.regs.get_mut(index as usize).ok_or(AttestError::BadIndex(index))?;
        *reg = extend_value(reg, measurement);
        Ok(*reg)
    }

    /// Only the ROM bootloader clears a register, immediately before
    /// measuring the freshly loaded image.
    pub(crate) fn clear_for_boot(&mut self, index: u8) -> Result<(), AttestError> {
        let reg = self.regs.get_mut(index as usize).ok_or(AttestError::BadIndex(index))?;
        *reg = Digest::ZERO;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    #[serde(with = "hex_array")]
    pub nonce: Nonce,
    pub selection: BTreeSet<u8>,
    pub pcr_values: Vec<Digest>,
    #[serde(with = "hex_array")]
    pub mac: [u8; TAG_LEN],
}

mod hex_array {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("wrong length"))
    }
}

fn selection_mask(selection: &BTreeSet<u8>) -> u32 {
    selection.iter().fold(0u32, |m, &i| m | (1u32 << (i as u32 % 32)))
}

fn quote_body(nonce: &Nonce, selection: &BTreeSet<u8>, values: &[Digest]) -> Vec<u8> {
    let mut body = Vec::with_capacity(NONCE_LEN + 4 + 32 * values.len());
    body.extend_from_slice(nonce);
    body.extend_from_slice(&selection_mask(selection).to_le_bytes());
    for v in values {
        body.extend_from_slice(v.as_bytes());
    }
    body
}

impl Quote {
    pub fn value_of(&self, index: u8) -> Option<Digest> {
        self.selection.iter().position(|&i| i == index).map(|p| self.pcr_values[p])
    }

    /// `nonce || mask || values || mac`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = quote_body(&self.nonce, &self.selection, &self.pcr_values);
        out.extend_from_slice(&self.mac);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Quote> {
        if bytes.len() < NONCE_LEN + 4 + TAG_LEN {
            return None;
        }
        let nonce: Nonce = bytes[..NONCE_LEN].try_into().ok()?;
        let mask = u32::from_le_bytes(bytes[NONCE_LEN..NONCE_LEN + 4].try_into().ok()?);
        let selection: BTreeSet<u8> = (0..32u8).filter(|i| mask & (1 << i) != 0).collect();
        let values_len = bytes.len() - NONCE_LEN - 4 - TAG_LEN;
        if values_len != 32 * selection.len() {
            return None;
        }
        let values = bytes[NONCE_LEN + 4..NONCE_LEN + 4 + values_len]
            .chunks(32)
            .map(|c| Digest::from_slice(c).expect("32-byte chunk"))
            .collect();
        let mac = bytes[bytes.len() - TAG_LEN..].try_into().ok()?;
        Some(Quote { nonce, selection, pcr_values: values, mac })
    }
}

pub fn quote(
    bank: &PcrBank,
    nonce: &Nonce,
    selection: &BTreeSet<u8>,
    device_key: &DeviceKey,
) -> Result<Quote, AttestError> {
    if selection.is_empty() {
        return Err(AttestError::EmptySelection);
    }
    let values = selection.iter().map(|&i| bank.get(i)).collect::<Result<Vec<_>, _>>()?;
    let mac = crypto::mac(device_key, &quote_body(nonce, selection, &values));
    Ok(Quote { nonce: *nonce, selection: selection.clone(), pcr_values: values, mac })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Mac,
    Nonce,
    PcrMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

/// Accepts iff the tag verifies, the nonce matches and every expected
/// register is selected and equal.
pub fn verify_quote(
    q: &Quote,
    expected: &BTreeMap<u8, Digest>,
    nonce: &Nonce,
    device_key: &DeviceKey,
) -> Verdict {
    if q.selection.len() != q.pcr_values.len() || q.selection.iter().any(|&i| i as usize >= MAX_PCRS) {
        return Verdict::Reject(RejectReason::Mac);
    }
    let body = quote_body(&q.nonce, &q.selection, &q.pcr_values);
    if !crypto::mac_verify(device_key, &body, &q.mac) {
        return Verdict::Reject(RejectReason::Mac);
    }
    if &q.nonce != nonce {
        return Verdict::Reject(RejectReason::Nonce);
    }
    for (&idx, want) in expected {
        if q.value_of(idx) != Some(*want) {
            return Verdict::Reject(RejectReason::PcrMismatch);
        }
    }
    Verdict::Accept
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BootImage {
    pub name: String,
    #[serde(with = "b64")]
    pub bytes: Vec<u8>,
}

mod b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

impl BootImage {
    pub fn new(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        BootImage { name: name.into(), bytes }
    }

    pub fn digest(&self) -> Digest {
        crypto::hash(&self.bytes)
    }

    pub fn name_is_valid(&self) -> bool {
        !self.name.is_empty() && self.name.len() <= MAX_IMAGE_NAME && self.name.is_ascii()
    }
}

/// ROM bootloader: wipe the domain's memory, clear its PCR and measure the
/// image into it. Returns the new PCR value.
pub fn bootload(
    memory: &mut [u8],
    pcr_index: u8,
    image: Option<&BootImage>,
    bank: &mut PcrBank,
) -> Result<Digest, AttestError> {
    let image = image.ok_or_else(|| AttestError::ImageMissing(String::new()))?;
    memory.fill(0);
    bank.clear_for_boot(pcr_index)?;
    bank.extend(pcr_index, &image.digest())
}

/// Request accepted by the TPM mediator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TpmRequest {
    Extend { pcr: u8, measurement: Digest },
    Quote { nonce: Nonce, selection: BTreeSet<u8> },
    Read { pcr: u8 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TpmResponse {
    Extended(Digest),
    Quote(Quote),
    Value(Digest),
    Error(AttestError),
}

/// Serves one request from the domain owning `requester_pcr`. A domain may
/// only extend its own register; quotes may select any registers.
pub fn tpm_mediate(
    bank: &mut PcrBank,
    requester_pcr: u8,
    request: &TpmRequest,
    device_key: &DeviceKey,
) -> TpmResponse {
    let res = match request {
        TpmRequest::Extend { pcr, measurement } => {
            if *pcr != requester_pcr {
                Err(AttestError::ForbiddenExtend)
            } else {
                bank.extend(*pcr, measurement).map(TpmResponse::Extended)
            }
        }
        TpmRequest::Quote { nonce, selection } => {
            quote(bank, nonce, selection, device_key).map(TpmResponse::Quote)
        }
        TpmRequest::Read { pcr } => bank.get(*pcr).map(TpmResponse::Value),
    };
    res.unwrap_or_else(TpmResponse::Error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest as _, Sha256};

    // Independent reference: straight SHA-256 over the concatenation.
    fn reference_extend(old: [u8; 32], m: [u8; 32]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(old);
        h.update(m);
        h.finalize().into()
    }

    const KEY: DeviceKey = [0x42; 32];

    #[test]
    fn extend_from_zero_matches_reference() {
        let mut bank = PcrBank::new(4);
        let d = crypto::hash(b"runtimeA");
        let v = bank.extend(1, &d).unwrap();
        assert_eq!(v.0, reference_extend([0; 32], d.0));
        assert_eq!(bank.get(1).unwrap(), v);
        assert_eq!(bank.get(0).unwrap(), Digest::ZERO);
    }

    #[test]
    fn extend_is_order_sensitive() {
        let (d1, d2) = (crypto::hash(b"one"), crypto::hash(b"two"));
        let mut a = PcrBank::new(1);
        a.extend(0, &d1).unwrap();
        a.extend(0, &d2).unwrap();
        let mut b = PcrBank::new(1);
        b.extend(0, &d2).unwrap();
        b.extend(0, &d1).unwrap();
        assert_ne!(a.get(0).unwrap(), b.get(0).unwrap());
    }

    #[test]
    fn bad_index() {
        let mut bank = PcrBank::new(2);
        assert_eq!(bank.extend(2, &Digest::ZERO), Err(AttestError::BadIndex(2)));
        assert_eq!(bank.get(9), Err(AttestError::BadIndex(9)));
    }

    #[test]
    fn bootload_measures_and_cleans() {
        let image = BootImage::new("runtimeA", b"program bytes".to_vec());
        let mut bank = PcrBank::new(3);
        bank.extend(2, &FRESHNESS_CONST).unwrap();
        let mut mem = vec![0xAAu8; 128];
        let v = bootload(&mut mem, 2, Some(&image), &mut bank).unwrap();
        assert!(mem.iter().all(|&b| b == 0));
        let expected = reference_extend([0; 32], Sha256::digest(b"program bytes").into());
        assert_eq!(v.0, expected);
        // reproducible
        let v2 = bootload(&mut mem, 2, Some(&image), &mut bank).unwrap();
        assert_eq!(v, v2);
        assert!(matches!(bootload(&mut mem, 2, None, &mut bank), Err(AttestError::ImageMissing(_))));
    }

    fn sel(ix: &[u8]) -> BTreeSet<u8> {
        ix.iter().copied().collect()
    }

    #[test]
    fn quote_round_trip_and_rejections() {
        let mut bank = PcrBank::new(4);
        bank.extend(1, &crypto::hash(b"img")).unwrap();
        let nonce = [9u8; 16];
        let q = quote(&bank, &nonce, &sel(&[1, 3]), &KEY).unwrap();
        let expected: BTreeMap<u8, Digest> = [(1, bank.get(1).unwrap())].into_iter().collect();
        assert_eq!(verify_quote(&q, &expected, &nonce, &KEY), Verdict::Accept);
        assert_eq!(Quote::decode(&q.encode()).unwrap(), q);

        let mut flipped = q.clone();
        flipped.mac[0] ^= 1;
        assert_eq!(verify_quote(&flipped, &expected, &nonce, &KEY), Verdict::Reject(RejectReason::Mac));
        assert_eq!(
            verify_quote(&q, &expected, &[0u8; 16], &KEY),
            Verdict::Reject(RejectReason::Nonce)
        );
        assert_eq!(verify_quote(&q, &expected, &nonce, &[0u8; 32]), Verdict::Reject(RejectReason::Mac));
        assert_eq!(quote(&bank, &nonce, &BTreeSet::new(), &KEY), Err(AttestError::EmptySelection));
    }

    #[test]
    fn freshness_extension_is_detected() {
        let img = crypto::hash(b"serial-out");
        let mut bank = PcrBank::new(2);
        bank.extend(1, &img).unwrap();
        bank.extend(1, &FRESHNESS_CONST).unwrap();
        let nonce = [1u8; 16];
        let q = quote(&bank, &nonce, &sel(&[1]), &KEY).unwrap();
        let boot_only: BTreeMap<u8, Digest> = [(1, boot_pcr(&img))].into_iter().collect();
        assert_eq!(verify_quote(&q, &boot_only, &nonce, &KEY), Verdict::Reject(RejectReason::PcrMismatch));
        let used: BTreeMap<u8, Digest> = [(1, used_pcr(&img))].into_iter().collect();
        assert_eq!(verify_quote(&q, &used, &nonce, &KEY), Verdict::Accept);
        // selection that omits the expected register is a mismatch
        let q0 = quote(&bank, &nonce, &sel(&[0]), &KEY).unwrap();
        assert_eq!(verify_quote(&q0, &used, &nonce, &KEY), Verdict::Reject(RejectReason::PcrMismatch));
    }

    #[test]
    fn mediator_enforces_own_register() {
        let mut bank = PcrBank::new(4);
        let ok = tpm_mediate(&mut bank, 1, &TpmRequest::Extend { pcr: 1, measurement: FRESHNESS_CONST }, &KEY);
        assert!(matches!(ok, TpmResponse::Extended(_)));
        let before = bank.clone();
        let no = tpm_mediate(&mut bank, 1, &TpmRequest::Extend { pcr: 2, measurement: FRESHNESS_CONST }, &KEY);
        assert_eq!(no, TpmResponse::Error(AttestError::ForbiddenExtend));
        assert_eq!(bank, before);
        let q = tpm_mediate(&mut bank, 1, &TpmRequest::Quote { nonce: [0; 16], selection: sel(&[2, 3]) }, &KEY);
        assert!(matches!(q, TpmResponse::Quote(_)));
    }
}
