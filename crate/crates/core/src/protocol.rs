//! Wire format spoken over mailboxes and permanent queues.
//!
//! Every message is one frame: `opcode u16 LE | len u16 LE | payload`.
//! A frame whose length field disagrees with the bytes present is
//! malformed. Payloads larger than a data-plane slot travel as fragments,
//! each prefixed with a u16 header (bit 15 marks the last fragment, the low
//! bits carry a sequence number).

use std::collections::BTreeSet;

use thiserror::Error;

use crate::attestation::{Digest, Nonce, Quote, NONCE_LEN};
use crate::mailbox::MsgLimit;

pub const HEADER_LEN: usize = 4;

pub mod op {
    pub const OK: u16 = 0x0001;
    pub const ERROR: u16 = 0x0002;
    pub const DISABLE: u16 = 0x0003;
    pub const QUERY_STATUS: u16 = 0x0004;
    pub const STATUS: u16 = 0x0005;
    pub const DATA: u16 = 0x0006;

    pub const PRINT: u16 = 0x0100;
    pub const READ_LINE: u16 = 0x0110;
    pub const LINE: u16 = 0x0111;

    pub const ALLOCATE: u16 = 0x0200;
    pub const BIND: u16 = 0x0201;
    pub const LOOKUP: u16 = 0x0202;
    pub const ENTRY: u16 = 0x0203;
    pub const STAGE: u16 = 0x0204;
    pub const READ_BOOT: u16 = 0x0205;
    pub const AUTH: u16 = 0x0210;
    pub const READ_BLOCKS: u16 = 0x0211;
    pub const WRITE_BLOCKS: u16 = 0x0212;

    pub const NET_SEND: u16 = 0x0300;
    pub const NET_PACKET: u16 = 0x0302;

    pub const SENSOR_READ: u16 = 0x0400;
    pub const GLUCOSE: u16 = 0x0401;
    pub const PUMP_UNLOCK: u16 = 0x0410;
    pub const PUMP_DOSE: u16 = 0x0411;

    pub const RM_REQUEST: u16 = 0x0500;
    pub const RM_GRANT: u16 = 0x0501;
    pub const RM_QUEUED: u16 = 0x0502;
    pub const RM_DENIED: u16 = 0x0503;

    pub const TPM_EXTEND: u16 = 0x0600;
    pub const TPM_EXTENDED: u16 = 0x0601;
    pub const TPM_QUOTE: u16 = 0x0602;
    pub const TPM_QUOTE_RESP: u16 = 0x0603;
    pub const TPM_ERROR: u16 = 0x0604;
    pub const TPM_READ: u16 = 0x0605;
    pub const TPM_VALUE: u16 = 0x0606;

    pub const IMAGE_HEADER: u16 = 0x0700;
}

/// Error codes carried by `ERROR` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrCode {
    Malformed = 1,
    Disabled = 2,
    UnknownOp = 3,
    AuthFailed = 4,
    OutOfPartition = 5,
    NotAuthenticated = 6,
    Overlap = 7,
    UnknownPartition = 8,
    NotFound = 9,
    BadMagic = 10,
    LinkDown = 11,
    Forbidden = 12,
    AlreadyDisabled = 13,
    PumpLocked = 14,
    BadRequest = 15,
}

impl ErrCode {
    pub fn from_u16(v: u16) -> Option<ErrCode> {
        use ErrCode::*;
        Some(match v {
            1 => Malformed,
            2 => Disabled,
            3 => UnknownOp,
            4 => AuthFailed,
            5 => OutOfPartition,
            6 => NotAuthenticated,
            7 => Overlap,
            8 => UnknownPartition,
            9 => NotFound,
            10 => BadMagic,
            11 => LinkDown,
            12 => Forbidden,
            13 => AlreadyDisabled,
            14 => PumpLocked,
            15 => BadRequest,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        use ErrCode::*;
        match self {
            Malformed => "malformed",
            Disabled => "disabled",
            UnknownOp => "unknown-op",
            AuthFailed => "auth-failed",
            OutOfPartition => "out-of-partition",
            NotAuthenticated => "not-authenticated",
            Overlap => "overlap",
            UnknownPartition => "unknown-partition",
            NotFound => "not-found",
            BadMagic => "bad-magic",
            LinkDown => "link-down",
            Forbidden => "forbidden",
            AlreadyDisabled => "already-disabled",
            PumpLocked => "pump-locked",
            BadRequest => "bad-request",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame shorter than header")]
    Short,
    #[error("length field {declared} does not match payload {actual}")]
    LengthMismatch { declared: usize, actual: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub op: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(op: u16, payload: impl Into<Vec<u8>>) -> Frame {
        Frame { op, payload: payload.into() }
    }

    pub fn empty(op: u16) -> Frame {
        Frame { op, payload: Vec::new() }
    }

    pub fn ok() -> Frame {
        Frame::empty(op::OK)
    }

    pub fn error(code: ErrCode) -> Frame {
        Frame::new(op::ERROR, (code as u16).to_le_bytes())
    }

    pub fn error_code(&self) -> Option<ErrCode> {
        if self.op != op::ERROR || self.payload.len() != 2 {
            return None;
        }
        ErrCode::from_u16(u16::from_le_bytes([self.payload[0], self.payload[1]]))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.op.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, FrameError> {
        if bytes.len() < HEADER_LEN {
            return Err(FrameError::Short);
        }
        let op = u16::from_le_bytes([bytes[0], bytes[1]]);
        let declared = u16::from_le_bytes([bytes[2], bytes[3]]) as usize;
        let actual = bytes.len() - HEADER_LEN;
        if declared != actual {
            return Err(FrameError::LengthMismatch { declared, actual });
        }
        Ok(Frame { op, payload: bytes[HEADER_LEN..].to_vec() })
    }
}

pub const FRAG_HEADER: usize = 2;
const LAST_BIT: u16 = 0x8000;

/// Splits `data` into `DATA` frame payloads that fit `slot` bytes.
pub fn fragment(data: &[u8], slot: usize) -> Vec<Frame> {
    let chunk = slot - HEADER_LEN - FRAG_HEADER;
    let pieces: Vec<&[u8]> = if data.is_empty() { vec![&[][..]] } else { data.chunks(chunk).collect() };
    let n = pieces.len();
    pieces
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut hdr = (i as u16) & !LAST_BIT;
            if i + 1 == n {
                hdr |= LAST_BIT;
            }
            let mut payload = hdr.to_le_bytes().to_vec();
            payload.extend_from_slice(p);
            Frame::new(op::DATA, payload)
        })
        .collect()
}

/// Incremental reassembly of fragments produced by [`fragment`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Reassembler {
    buf: Vec<u8>,
    next_seq: u16,
}

impl Reassembler {
    /// Feeds one DATA payload. Returns the whole message once the last
    /// fragment arrives; an out-of-order fragment restarts reassembly.
    pub fn push(&mut self, payload: &[u8]) -> Result<Option<Vec<u8>>, ErrCode> {
        if payload.len() < FRAG_HEADER {
            return Err(ErrCode::Malformed);
        }
        let hdr = u16::from_le_bytes([payload[0], payload[1]]);
        let seq = hdr & !LAST_BIT;
        if seq != self.next_seq {
            self.reset();
            return Err(ErrCode::Malformed);
        }
        self.buf.extend_from_slice(&payload[FRAG_HEADER..]);
        self.next_seq = self.next_seq.wrapping_add(1);
        if hdr & LAST_BIT != 0 {
            let out = std::mem::take(&mut self.buf);
            self.next_seq = 0;
            return Ok(Some(out));
        }
        Ok(None)
    }

    pub fn reset(&mut self) {
        self.buf.clear();
        self.next_seq = 0;
    }

    pub fn in_progress(&self) -> bool {
        self.next_seq != 0
    }
}

/// Resource identifiers used in requests to the resource manager.
pub mod resource {
    pub const SERIAL_IN: u8 = 1;
    pub const SERIAL_OUT: u8 = 2;
    pub const STORAGE: u8 = 3;
    pub const NETWORK: u8 = 4;
    pub const GLUCOSE_SENSOR: u8 = 5;
    pub const INSULIN_PUMP: u8 = 6;
    /// IPC channel towards the TEE with the given domain id: `IPC_BASE + id`.
    pub const IPC_BASE: u8 = 0x80;
}

/// Why a client asks for a resource; only used for trace detail.
pub mod purpose {
    pub const GENERAL: u8 = 0;
    pub const UI: u8 = 1;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RmRequest {
    pub resource: u8,
    pub msgs: MsgLimit,
    pub duration: u32,
    pub purpose: u8,
}

impl RmRequest {
    pub fn to_frame(&self) -> Frame {
        let mut p = vec![self.resource];
        p.extend_from_slice(&self.msgs.to_wire().to_le_bytes());
        p.extend_from_slice(&self.duration.to_le_bytes());
        p.push(self.purpose);
        Frame::new(op::RM_REQUEST, p)
    }

    pub fn from_frame(f: &Frame) -> Option<RmRequest> {
        if f.op != op::RM_REQUEST || f.payload.len() != 10 {
            return None;
        }
        let p = &f.payload;
        Some(RmRequest {
            resource: p[0],
            msgs: MsgLimit::from_wire(u32::from_le_bytes(p[1..5].try_into().ok()?)),
            duration: u32::from_le_bytes(p[5..9].try_into().ok()?),
            purpose: p[9],
        })
    }
}

/// `RM_GRANT`: resource u8, then the granted mailbox ids.
pub fn grant_frame(resource: u8, mailboxes: &[u16]) -> Frame {
    let mut p = vec![resource];
    for m in mailboxes {
        p.extend_from_slice(&m.to_le_bytes());
    }
    Frame::new(op::RM_GRANT, p)
}

pub fn parse_grant(f: &Frame) -> Option<(u8, Vec<u16>)> {
    if f.op != op::RM_GRANT || f.payload.is_empty() || f.payload.len() % 2 != 1 {
        return None;
    }
    let ids = f.payload[1..].chunks(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Some((f.payload[0], ids))
}

pub fn tpm_extend_frame(pcr: u8, measurement: &Digest) -> Frame {
    let mut p = vec![pcr];
    p.extend_from_slice(measurement.as_bytes());
    Frame::new(op::TPM_EXTEND, p)
}

pub fn selection_mask(selection: &BTreeSet<u8>) -> u32 {
    selection.iter().filter(|&&i| i < 32).fold(0u32, |m, &i| m | (1 << i))
}

pub fn mask_selection(mask: u32) -> BTreeSet<u8> {
    (0..32u8).filter(|i| mask & (1 << i) != 0).collect()
}

pub fn tpm_quote_frame(nonce: &Nonce, selection: &BTreeSet<u8>) -> Frame {
    let mut p = nonce.to_vec();
    p.extend_from_slice(&selection_mask(selection).to_le_bytes());
    Frame::new(op::TPM_QUOTE, p)
}

pub fn parse_tpm_quote(f: &Frame) -> Option<(Nonce, BTreeSet<u8>)> {
    if f.op != op::TPM_QUOTE || f.payload.len() != NONCE_LEN + 4 {
        return None;
    }
    let nonce: Nonce = f.payload[..NONCE_LEN].try_into().ok()?;
    let mask = u32::from_le_bytes(f.payload[NONCE_LEN..].try_into().ok()?);
    Some((nonce, mask_selection(mask)))
}

pub fn quote_resp_frame(q: &Quote) -> Frame {
    Frame::new(op::TPM_QUOTE_RESP, q.encode())
}

/// `STATUS` reply payload for a service: state byte then PCR-agnostic detail.
pub fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn get_u32(bytes: &[u8], at: usize) -> Option<u32> {
    Some(u32::from_le_bytes(bytes.get(at..at + 4)?.try_into().ok()?))
}

pub fn get_u16(bytes: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_le_bytes(bytes.get(at..at + 2)?.try_into().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let f = Frame::new(op::PRINT, b"hello".to_vec());
        let bytes = f.encode();
        assert_eq!(&bytes[..4], &[0x00, 0x01, 5, 0]);
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn length_field_must_match() {
        let mut bytes = Frame::new(op::PRINT, b"abc".to_vec()).encode();
        bytes.push(0);
        assert_eq!(
            Frame::decode(&bytes),
            Err(FrameError::LengthMismatch { declared: 3, actual: 4 })
        );
        assert_eq!(Frame::decode(&[1, 0, 0]), Err(FrameError::Short));
    }

    #[test]
    fn fragments_fit_slot_and_reassemble() {
        let data: Vec<u8> = (0..2000u32).map(|i| (i % 251) as u8).collect();
        let frags = fragment(&data, 512);
        assert_eq!(frags.len(), 4);
        assert!(frags.iter().all(|f| f.encode().len() <= 512));
        let mut r = Reassembler::default();
        let mut out = None;
        for f in &frags {
            out = r.push(&f.payload).unwrap();
        }
        assert_eq!(out.unwrap(), data);
        assert!(!r.in_progress());
    }

    #[test]
    fn empty_message_is_one_fragment() {
        let frags = fragment(&[], 64);
        assert_eq!(frags.len(), 1);
        let mut r = Reassembler::default();
        assert_eq!(r.push(&frags[0].payload).unwrap(), Some(vec![]));
    }

    #[test]
    fn out_of_order_fragment_is_rejected() {
        let frags = fragment(&[7u8; 1200], 512);
        let mut r = Reassembler::default();
        assert_eq!(r.push(&frags[1].payload), Err(ErrCode::Malformed));
    }

    #[test]
    fn rm_request_round_trip() {
        let req = RmRequest { resource: resource::STORAGE, msgs: MsgLimit::Infinite, duration: 300, purpose: 0 };
        assert_eq!(RmRequest::from_frame(&req.to_frame()), Some(req));
        let g = grant_frame(3, &[4, 5, 6, 7]);
        assert_eq!(parse_grant(&g), Some((3, vec![4, 5, 6, 7])));
    }

    #[test]
    fn selection_mask_round_trip() {
        let sel: BTreeSet<u8> = [0, 5, 31].into_iter().collect();
        assert_eq!(mask_selection(selection_mask(&sel)), sel);
    }
}
