//! Deterministic emulator of a split-trust machine: hardware mailboxes that
//! can be delegated between isolated domains, a resource manager arbitrating
//! I/O services, and TEE programs that verify what they were given.

pub mod attestation;
pub mod crypto;
pub mod devices;
pub mod firmware;
pub mod harness;
pub mod io_services;
pub mod mailbox;
pub mod manifest;
pub mod peers;
pub mod platform;
pub mod protocol;
pub mod resource_manager;
pub mod scenarios;
pub mod tcb;
pub mod tee_runtime;
pub mod trace;
pub mod untrusted_compat;

pub use mailbox::{DomainId, MailboxId, MsgLimit, Tick};
pub use platform::Machine;
