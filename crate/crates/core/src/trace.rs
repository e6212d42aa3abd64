//! Structured execution trace. One JSON object per line.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::mailbox::{DomainId, MailboxId, Tick};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PowerOn,
    SessionExpired,
    Delegated,
    Yielded,
    MsgWrite,
    MsgRead,
    AccessDenied,
    StatusRead,
    QueueSend,
    ResetBlocked,
    DomainReset,
    MailboxReset,
    BootStart,
    ImageLoaded,
    BootAborted,
    BootComplete,
    PcrExtended,
    QuoteIssued,
    TpmForbidden,
    ArbiterRoute,
    DmaTransfer,
    DmaRejected,
    DmaDone,
    FreshnessMarked,
    ServiceDisabled,
    DisableWithPendingData,
    DeviceEffect,
    ServiceError,
    RequestReceived,
    RequestQueued,
    Granted,
    PolicyDenied,
    RequestDropped,
    SessionEnded,
    StorageAllocated,
    StorageBound,
    StorageAuth,
    StorageIo,
    ShellCommand,
    ShellPrompt,
    SessionVerified,
    VerifyFailed,
    SessionClosed,
    NetPacket,
    Attack,
    Note,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: Tick,
    pub event: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mailbox: Option<MailboxId>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

pub fn write_jsonl<W: Write>(events: &[TraceEvent], mut w: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Vec<TraceEvent>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1)))?;
        out.push(ev);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let evs = vec![
            TraceEvent { tick: 0, event: EventKind::PowerOn, domain: None, mailbox: None, detail: String::new() },
            TraceEvent {
                tick: 3,
                event: EventKind::Delegated,
                domain: Some(DomainId(0)),
                mailbox: Some(MailboxId(4)),
                detail: "to 1".into(),
            },
        ];
        let mut buf = Vec::new();
        write_jsonl(&evs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"power_on\""));
        assert_eq!(read_jsonl(&buf[..]).unwrap(), evs);
    }

    #[test]
    fn bad_line_reports_position() {
        let err = read_jsonl(&b"{\"tick\":0,\"event\":\"power_on\"}\nnope\n"[..]).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
