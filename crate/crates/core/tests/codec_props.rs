use proptest::prelude::*;

use splitmachine::crypto::{ae_open, ae_seal, AE_NONCE_LEN, KEY_LEN, TAG_LEN};
use splitmachine::protocol::{fragment, op, Frame, FrameError, Reassembler, HEADER_LEN};

proptest! {
    #[test]
    fn frame_round_trip(code in any::<u16>(), payload in proptest::collection::vec(any::<u8>(), 0..=508)) {
        let f = Frame::new(code, payload);
        let bytes = f.encode();
        prop_assert_eq!(bytes.len(), HEADER_LEN + f.payload.len());
        prop_assert_eq!(Frame::decode(&bytes), Ok(f));
    }

    #[test]
    fn decode_rejects_bad_length(payload in proptest::collection::vec(any::<u8>(), 0..64), extra in 1u16..100) {
        let mut bytes = Frame::new(op::DATA, payload.clone()).encode();
        let lie = (payload.len() as u16).wrapping_add(extra);
        bytes[2..4].copy_from_slice(&lie.to_le_bytes());
        let rejected = matches!(Frame::decode(&bytes), Err(FrameError::LengthMismatch { .. }));
        prop_assert!(rejected);
    }

    #[test]
    fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..40)) {
        if let Ok(f) = Frame::decode(&bytes) {
            prop_assert_eq!(f.encode(), bytes);
        }
    }

    #[test]
    fn fragments_reassemble(data in proptest::collection::vec(any::<u8>(), 0..3000), slot in 8usize..600) {
        let frames = fragment(&data, slot);
        let mut rx = Reassembler::default();
        let mut out = None;
        for (i, f) in frames.iter().enumerate() {
            prop_assert_eq!(f.op, op::DATA);
            prop_assert!(f.encode().len() <= slot);
            let r = rx.push(&f.payload).unwrap();
            prop_assert_eq!(r.is_some(), i + 1 == frames.len());
            out = r.or(out);
        }
        prop_assert_eq!(out, Some(data));
        prop_assert!(!rx.in_progress());
    }

    #[test]
    fn out_of_order_fragment_restarts(data in proptest::collection::vec(any::<u8>(), 20..200)) {
        let frames = fragment(&data, 16);
        let mut rx = Reassembler::default();
        prop_assert!(rx.push(&frames[1].payload).is_err());
        prop_assert!(!rx.in_progress());
    }

    #[test]
    fn seal_open_round_trip(
        key in any::<[u8; KEY_LEN]>(),
        nonce in any::<[u8; AE_NONCE_LEN]>(),
        msg in proptest::collection::vec(any::<u8>(), 0..300),
    ) {
        let sealed = ae_seal(&key, &nonce, &msg);
        prop_assert_eq!(sealed.len(), AE_NONCE_LEN + msg.len() + TAG_LEN);
        prop_assert_eq!(ae_open(&key, &sealed), Ok(msg));
    }

    #[test]
    fn open_rejects_any_flip(
        key in any::<[u8; KEY_LEN]>(),
        msg in proptest::collection::vec(any::<u8>(), 0..64),
        at in any::<prop::sample::Index>(),
        flip in 1u8..=255,
    ) {
        let mut sealed = ae_seal(&key, &[7; AE_NONCE_LEN], &msg);
        let i = at.index(sealed.len());
        sealed[i] ^= flip;
        prop_assert!(ae_open(&key, &sealed).is_err());
    }

    #[test]
    fn open_rejects_wrong_key(key in any::<[u8; KEY_LEN]>(), other in any::<[u8; KEY_LEN]>()) {
        prop_assume!(key != other);
        let sealed = ae_seal(&key, &[1; AE_NONCE_LEN], b"balance");
        prop_assert!(ae_open(&other, &sealed).is_err());
    }
}

#[test]
fn truncated_ciphertext_rejected() {
    let key = [3u8; KEY_LEN];
    let sealed = ae_seal(&key, &[0; AE_NONCE_LEN], b"0123456789");
    for n in 0..sealed.len() {
        assert!(ae_open(&key, &sealed[..n]).is_err(), "prefix {n} accepted");
    }
}
