//! Cryptographic routines shared by the root of trust and the TEE runtime.
//!
//! Pinned algorithms:
//! - hash: SHA-256
//! - MAC: HMAC-SHA256
//! - authenticated encryption: ChaCha20 (RFC 8439 variant, 96-bit nonce)
//!   followed by HMAC-SHA256 over `nonce || ciphertext` (encrypt-then-MAC).
//!   The cipher and MAC keys are derived from the 32-byte key as
//!   `HMAC(key, "enc")` and `HMAC(key, "mac")`.
//!
//! These are model-level primitives: nothing here is hardened against timing
//! side channels.

use std::fmt;

use chacha20::cipher::{KeyIvInit, StreamCipher};
use chacha20::ChaCha20;
use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

pub const KEY_LEN: usize = 32;
pub const TAG_LEN: usize = 32;
pub const AE_NONCE_LEN: usize = 12;

/// A 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let bytes = hex::decode(s).ok()?;
        Some(Digest(bytes.try_into().ok()?))
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Digest> {
        Some(Digest(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex chars"))
    }
}

pub fn hash(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Hash of the concatenation of several byte strings.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

pub fn mac(key: &[u8; KEY_LEN], bytes: &[u8]) -> [u8; TAG_LEN] {
    mac_parts(key, &[bytes])
}

pub fn mac_parts(key: &[u8; KEY_LEN], parts: &[&[u8]]) -> [u8; TAG_LEN] {
    let mut m = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        m.update(p);
    }
    m.finalize().into_bytes().into()
}

/// Constant-time tag comparison.
pub fn mac_verify(key: &[u8; KEY_LEN], bytes: &[u8], tag: &[u8]) -> bool {
    let mut m = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    m.update(bytes);
    m.verify_slice(tag).is_ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("authentication failure")]
    AuthFailure,
    #[error("sealed box shorter than nonce and tag")]
    Truncated,
}

fn subkeys(key: &[u8; KEY_LEN]) -> ([u8; 32], [u8; 32]) {
    (mac(key, b"enc"), mac(key, b"mac"))
}

/// Sealed layout: `nonce(12) || ciphertext || tag(32)`.
pub fn ae_seal(key: &[u8; KEY_LEN], nonce: &[u8; AE_NONCE_LEN], plaintext: &[u8]) -> Vec<u8> {
    let (enc, auth) = subkeys(key);
    let mut out = Vec::with_capacity(AE_NONCE_LEN + plaintext.len() + TAG_LEN);
    out.extend_from_slice(nonce);
    out.extend_from_slice(plaintext);
    let mut cipher = ChaCha20::new(&enc.into(), nonce.into());
    cipher.apply_keystream(&mut out[AE_NONCE_LEN..]);
    let tag = mac(&auth, &out);
    out.extend_from_slice(&tag);
    out
}

pub fn ae_open(key: &[u8; KEY_LEN], sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < AE_NONCE_LEN + TAG_LEN {
        return Err(CryptoError::Truncated);
    }
    let (enc, auth) = subkeys(key);
    let (body, tag) = sealed.split_at(sealed.len() - TAG_LEN);
    if !mac_verify(&auth, body, tag) {
        return Err(CryptoError::AuthFailure);
    }
    let nonce: [u8; AE_NONCE_LEN] = body[..AE_NONCE_LEN].try_into().expect("length checked");
    let mut plain = body[AE_NONCE_LEN..].to_vec();
    let mut cipher = ChaCha20::new(&enc.into(), (&nonce).into());
    cipher.apply_keystream(&mut plain);
    Ok(plain)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_string_digest_matches_published_vector() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hmac_rfc4231_case_2() {
        // RFC 4231 uses a 4-byte key, so go through the raw type.
        let mut m = HmacSha256::new_from_slice(b"Jefe").unwrap();
        m.update(b"what do ya want for nothing?");
        assert_eq!(
            hex::encode(m.finalize().into_bytes()),
            "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
        );
    }

    #[test]
    fn seal_open_round_trip() {
        let key = [7u8; 32];
        let nonce = [1u8; 12];
        let sealed = ae_seal(&key, &nonce, b"attack at dawn");
        assert_eq!(ae_open(&key, &sealed).unwrap(), b"attack at dawn");
        assert_ne!(&sealed[12..26], b"attack at dawn");
    }

    #[test]
    fn open_rejects_flipped_byte_and_wrong_key() {
        let key = [7u8; 32];
        let mut sealed = ae_seal(&key, &[0u8; 12], b"hello");
        assert_eq!(ae_open(&[8u8; 32], &sealed), Err(CryptoError::AuthFailure));
        sealed[13] ^= 0x40;
        assert_eq!(ae_open(&key, &sealed), Err(CryptoError::AuthFailure));
        assert_eq!(ae_open(&key, &sealed[..10]), Err(CryptoError::Truncated));
    }

    #[test]
    fn digest_hex_round_trip() {
        let d = hash(b"x");
        assert_eq!(Digest::from_hex(&d.to_hex()), Some(d));
        assert_eq!(Digest::from_hex("zz"), None);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<Digest>(&json).unwrap(), d);
    }
}
