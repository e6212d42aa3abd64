//! Remote parties reachable over the network link: a loopback, a sink, a
//! bank verifier and a health-provider server. The last two admit a client
//! only after checking a TPM quote of the client's PCR.
//!
//! Packet layout: one type byte followed by the body.
//!
//! | type | body                         |
//! |------|------------------------------|
//! | 0x01 | hello (empty)                |
//! | 0x02 | challenge nonce (16)         |
//! | 0x03 | encoded quote                |
//! | 0x04 | accept, sealed greeting      |
//! | 0x05 | reject, reason byte          |
//! | 0x06 | sealed application data      |
//!
//! The session key is `HMAC(app_secret, "session" || nonce)`. This is a
//! minimal handshake: it binds the key to the attested nonce and nothing
//! more.

use crate::attestation::{verify_quote, Digest, DeviceKey, Nonce, Quote, Verdict, NONCE_LEN};
use crate::crypto::{self, ae_open, ae_seal, AE_NONCE_LEN};
use crate::devices::unlock_token;

pub mod pkt {
    pub const HELLO: u8 = 0x01;
    pub const CHALLENGE: u8 = 0x02;
    pub const ATTEST: u8 = 0x03;
    pub const ACCEPT: u8 = 0x04;
    pub const REJECT: u8 = 0x05;
    pub const SEALED: u8 = 0x06;
}

/// Secret baked into a genuine program image and known to its server.
pub fn app_secret(image: &str) -> [u8; 32] {
    crypto::hash_parts(&[b"app-secret:", image.as_bytes()]).0
}

/// Key shared by the health provider and the insulin pump for unlock tokens.
pub fn provider_key() -> [u8; 32] {
    crypto::hash(b"health provider unlock key").0
}

pub fn session_key(secret: &[u8; 32], nonce: &Nonce) -> [u8; 32] {
    crypto::mac_parts(secret, &[b"session", nonce])
}

/// Deterministic AE nonce for message `counter` in direction `dir`.
pub fn ae_nonce(dir: u8, counter: u64) -> [u8; AE_NONCE_LEN] {
    let mut n = [0u8; AE_NONCE_LEN];
    n[0] = dir;
    n[4..].copy_from_slice(&counter.to_le_bytes());
    n
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verifier {
    pub device_key: DeviceKey,
    pub client_pcr: u8,
    pub expected_pcr: Digest,
    pub secret: [u8; 32],
    seed: u64,
    counter: u64,
    nonce: Option<Nonce>,
    key: Option<[u8; 32]>,
    sent: u64,
    pub accepted: u32,
    pub rejected: u32,
    /// Decrypted application messages received from the client.
    pub log: Vec<Vec<u8>>,
}

impl Verifier {
    pub fn new(device_key: DeviceKey, client_pcr: u8, expected_pcr: Digest, secret: [u8; 32], seed: u64) -> Self {
        Verifier {
            device_key,
            client_pcr,
            expected_pcr,
            secret,
            seed,
            counter: 0,
            nonce: None,
            key: None,
            sent: 0,
            accepted: 0,
            rejected: 0,
            log: Vec::new(),
        }
    }

    pub fn has_session(&self) -> bool {
        self.key.is_some()
    }

    fn fresh_nonce(&mut self) -> Nonce {
        self.counter += 1;
        let h = crypto::hash_parts(&[b"verifier-nonce", &self.seed.to_le_bytes(), &self.counter.to_le_bytes()]);
        h.0[..NONCE_LEN].try_into().expect("16 of 32 bytes")
    }

    fn seal(&mut self, key: &[u8; 32], body: &[u8]) -> Vec<u8> {
        self.sent += 1;
        ae_seal(key, &ae_nonce(1, self.sent), body)
    }

    /// Handles handshake packets; returns `Some(plaintext)` for sealed data
    /// that the caller should act upon, with replies appended to `out`.
    fn handle(&mut self, packet: &[u8], greeting: &[u8], out: &mut Vec<Vec<u8>>) -> Option<Vec<u8>> {
        let (&ty, body) = packet.split_first()?;
        match ty {
            pkt::HELLO => {
                let n = self.fresh_nonce();
                self.nonce = Some(n);
                self.key = None;
                let mut p = vec![pkt::CHALLENGE];
                p.extend_from_slice(&n);
                out.push(p);
                None
            }
            pkt::ATTEST => {
                let verdict = match (Quote::decode(body), self.nonce.take()) {
                    (Some(q), Some(n)) => {
                        let expected = [(self.client_pcr, self.expected_pcr)].into_iter().collect();
                        match verify_quote(&q, &expected, &n, &self.device_key) {
                            Verdict::Accept => Ok(n),
                            Verdict::Reject(r) => Err(r as u8 + 1),
                        }
                    }
                    _ => Err(0),
                };
                match verdict {
                    Ok(n) => {
                        let key = session_key(&self.secret, &n);
                        self.key = Some(key);
                        self.sent = 0;
                        self.accepted += 1;
                        let mut p = vec![pkt::ACCEPT];
                        p.extend(self.seal(&key, greeting));
                        out.push(p);
                    }
                    Err(reason) => {
                        self.rejected += 1;
                        out.push(vec![pkt::REJECT, reason]);
                    }
                }
                None
            }
            pkt::SEALED => {
                let key = self.key?;
                let plain = ae_open(&key, body).ok()?;
                self.log.push(plain.clone());
                Some(plain)
            }
            _ => None,
        }
    }

    fn reply_sealed(&mut self, body: &[u8], out: &mut Vec<Vec<u8>>) {
        if let Some(key) = self.key {
            let mut p = vec![pkt::SEALED];
            p.extend(self.seal(&key, body));
            out.push(p);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bank {
    pub verifier: Verifier,
    pub credential: String,
    pub balance_cents: u64,
    pub logged_in: bool,
    pub transfers: Vec<String>,
}

impl Bank {
    fn respond(&mut self, packet: &[u8]) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        let Some(msg) = self.verifier.handle(packet, b"bank ready", &mut out) else {
            return out;
        };
        let text = String::from_utf8_lossy(&msg).into_owned();
        let reply = if let Some(cred) = text.strip_prefix("login ") {
            self.logged_in = cred == self.credential;
            if self.logged_in {
                format!("welcome, balance {}.{:02}", self.balance_cents / 100, self.balance_cents % 100)
            } else {
                "login refused".to_string()
            }
        } else if let Some(tx) = text.strip_prefix("transfer ") {
            let amount = tx.split_whitespace().next().and_then(|a| a.parse::<u64>().ok());
            match amount {
                Some(a) if self.logged_in && a * 100 <= self.balance_cents => {
                    self.balance_cents -= a * 100;
                    self.transfers.push(tx.to_string());
                    format!("transfer ok, balance {}.{:02}", self.balance_cents / 100, self.balance_cents % 100)
                }
                _ => "transfer refused".to_string(),
            }
        } else {
            "unknown request".to_string()
        };
        self.verifier.reply_sealed(reply.as_bytes(), &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HealthServer {
    pub verifier: Verifier,
    pub provider_key: [u8; 32],
    pub epoch: u32,
    /// `(period, glucose, dose)` reports received.
    pub reports: Vec<(u32, u16, u16)>,
}

impl HealthServer {
    fn respond(&mut self, packet: &[u8]) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        let Some(msg) = self.verifier.handle(packet, b"health ready", &mut out) else {
            return out;
        };
        if msg.len() != 8 {
            self.verifier.reply_sealed(b"bad report", &mut out);
            return out;
        }
        let period = u32::from_le_bytes(msg[0..4].try_into().expect("len checked"));
        let glucose = u16::from_le_bytes([msg[4], msg[5]]);
        let dose = u16::from_le_bytes([msg[6], msg[7]]);
        self.reports.push((period, glucose, dose));
        let token = unlock_token(&self.provider_key, self.epoch);
        self.epoch += 1;
        self.verifier.reply_sealed(&token, &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Responder {
    Sink,
    Loopback,
    Bank(Box<Bank>),
    Health(Box<HealthServer>),
}

impl Responder {
    pub fn respond(&mut self, packet: &[u8]) -> Vec<Vec<u8>> {
        match self {
            Responder::Sink => Vec::new(),
            Responder::Loopback => vec![packet.to_vec()],
            Responder::Bank(b) => b.respond(packet),
            Responder::Health(h) => h.respond(packet),
        }
    }

    pub fn verifier(&self) -> Option<&Verifier> {
        match self {
            Responder::Bank(b) => Some(&b.verifier),
            Responder::Health(h) => Some(&h.verifier),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::{boot_pcr, quote, PcrBank};

    const KEY: DeviceKey = [9; 32];

    fn setup() -> (PcrBank, Bank) {
        let img = crypto::hash(b"bankapp bytes");
        let mut bank = PcrBank::new(4);
        bank.extend(1, &img).unwrap();
        let v = Verifier::new(KEY, 1, boot_pcr(&img), app_secret("bankapp"), 7);
        let b = Bank { verifier: v, credential: "1234".into(), balance_cents: 10_000, logged_in: false, transfers: vec![] };
        (bank, b)
    }

    fn handshake(pcrs: &PcrBank, b: &mut Bank) -> Option<[u8; 32]> {
        let ch = b.respond(&[pkt::HELLO]).pop().unwrap();
        assert_eq!(ch[0], pkt::CHALLENGE);
        let nonce: Nonce = ch[1..].try_into().unwrap();
        let q = quote(pcrs, &nonce, &[1].into_iter().collect(), &KEY).unwrap();
        let mut p = vec![pkt::ATTEST];
        p.extend(q.encode());
        let r = b.respond(&p).pop().unwrap();
        (r[0] == pkt::ACCEPT).then(|| session_key(&app_secret("bankapp"), &nonce))
    }

    #[test]
    fn genuine_client_logs_in() {
        let (pcrs, mut b) = setup();
        let key = handshake(&pcrs, &mut b).expect("accepted");
        let mut p = vec![pkt::SEALED];
        p.extend(ae_seal(&key, &ae_nonce(0, 1), b"login 1234"));
        let r = b.respond(&p).pop().unwrap();
        assert_eq!(r[0], pkt::SEALED);
        let text = ae_open(&key, &r[1..]).unwrap();
        assert_eq!(text, b"welcome, balance 100.00");
    }

    #[test]
    fn modified_program_is_rejected() {
        let (mut pcrs, mut b) = setup();
        pcrs.extend(1, &crypto::hash(b"patch")).unwrap();
        assert!(handshake(&pcrs, &mut b).is_none());
        assert_eq!(b.verifier.rejected, 1);
    }

    #[test]
    fn sealed_data_without_session_is_ignored() {
        let (_, mut b) = setup();
        let mut p = vec![pkt::SEALED];
        p.extend(ae_seal(&[0; 32], &ae_nonce(0, 1), b"login 1234"));
        assert!(b.respond(&p).is_empty());
    }
}
