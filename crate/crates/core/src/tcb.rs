//! Trusted-computing-base report derived from a scenario trace.
//!
//! For each guarantee the report lists the components the owner must
//! trust strongly (against adversarial input) and weakly (only on
//! well-formed input), counting only components the run actually used.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::mailbox::DomainId;
use crate::manifest::{DomainKind, MachineManifest};
use crate::protocol::resource;
use crate::resource_manager::lookup_resource;
use crate::trace::{EventKind, TraceEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Guarantee {
    C,
    I,
    As,
    Ag,
}

impl Guarantee {
    pub const ALL: [Guarantee; 4] = [Guarantee::C, Guarantee::I, Guarantee::As, Guarantee::Ag];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "Prog")]
    Prog,
    #[serde(rename = "mailbox")]
    Mailbox,
    #[serde(rename = "reset-guard")]
    ResetGuard,
    #[serde(rename = "arbiter")]
    Arbiter,
    #[serde(rename = "RoT")]
    RoT,
    #[serde(rename = "RM")]
    Rm,
    #[serde(rename = "SD")]
    Sd,
    #[serde(rename = "Proc")]
    Proc,
    #[serde(rename = "Mem")]
    Mem,
    #[serde(rename = "I/O")]
    Io,
    #[serde(rename = "interconnects")]
    Interconnects,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Prog => "Prog",
            Component::Mailbox => "mailbox",
            Component::ResetGuard => "reset-guard",
            Component::Arbiter => "arbiter",
            Component::RoT => "RoT",
            Component::Rm => "RM",
            Component::Sd => "SD",
            Component::Proc => "Proc",
            Component::Mem => "Mem",
            Component::Io => "I/O",
            Component::Interconnects => "interconnects",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustSets {
    pub strong: BTreeSet<Component>,
    pub weak: BTreeSet<Component>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcbReport {
    pub guarantees: BTreeMap<Guarantee, TrustSets>,
}

impl TcbReport {
    pub fn strong(&self, g: Guarantee) -> BTreeSet<Component> {
        self.guarantees.get(&g).map(|s| s.strong.clone()).unwrap_or_default()
    }

    pub fn weak(&self, g: Guarantee) -> BTreeSet<Component> {
        self.guarantees.get(&g).map(|s| s.weak.clone()).unwrap_or_default()
    }

    pub fn is_empty(&self) -> bool {
        self.guarantees.values().all(|s| s.strong.is_empty() && s.weak.is_empty())
    }
}

fn list(set: &BTreeSet<Component>) -> String {
    set.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for TcbReport {
    /// Guarantees with identical sets are grouped, e.g.
    /// `Owner ⊤{C,I,As} s:{..} w:{..} ∪ ⊤{Ag} s:{..} w:{..}`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut groups: Vec<(Vec<Guarantee>, &TrustSets)> = Vec::new();
        for g in Guarantee::ALL {
            let Some(sets) = self.guarantees.get(&g) else { continue };
            match groups.iter_mut().find(|(_, s)| *s == sets) {
                Some((gs, _)) => gs.push(g),
                None => groups.push((vec![g], sets)),
            }
        }
        if groups.is_empty() {
            return f.write_str("Owner ⊤{} s:{} w:{}");
        }
        f.write_str("Owner ")?;
        for (i, (gs, sets)) in groups.iter().enumerate() {
            if i > 0 {
                f.write_str(" ∪ ")?;
            }
            let names: Vec<String> = gs.iter().map(|g| format!("{g:?}")).collect();
            write!(f, "⊤{{{}}} s:{{{}}} w:{{{}}}", names.join(","), list(&sets.strong), list(&sets.weak))?;
        }
        Ok(())
    }
}

/// Resource id named in a `SessionVerified` detail ("resource 0x03").
fn verified_resource(detail: &str) -> Option<u8> {
    let hex = detail.strip_prefix("resource 0x")?;
    u8::from_str_radix(hex.get(..2)?, 16).ok()
}

/// Derives the report from the sessions TEE programs verified in `trace`.
pub fn tcb_report(trace: &[TraceEvent], manifest: &MachineManifest) -> TcbReport {
    let is_tee = |d: Option<DomainId>| d.and_then(|d| manifest.domain(d)).is_some_and(|s| s.kind == DomainKind::Tee);
    let mut sessions: Vec<(DomainId, u8)> = Vec::new();
    for e in trace {
        if e.event == EventKind::SessionVerified && is_tee(e.domain) {
            if let (Some(d), Some(r)) = (e.domain, verified_resource(&e.detail)) {
                sessions.push((d, r));
            }
        }
    }
    let mut report = TcbReport::default();
    if sessions.is_empty() {
        return report;
    }
    let arbitrated: BTreeSet<DomainId> = manifest.arbiters.iter().map(|a| a.io_domain).collect();
    let uses_arbiter = sessions.iter().any(|&(d, r)| {
        lookup_resource(manifest, d, r).is_some_and(|res| res.device.is_some() && arbitrated.contains(&res.domain))
    });
    let uses_device = sessions.iter().any(|&(_, r)| r < resource::IPC_BASE);
    let mut storage_sessions: BTreeMap<DomainId, usize> = BTreeMap::new();
    for &(d, r) in &sessions {
        if r == resource::STORAGE {
            *storage_sessions.entry(d).or_default() += 1;
        }
    }
    let cross_session_storage = storage_sessions.values().any(|&n| n >= 2);

    let mut strong: BTreeSet<Component> =
        [Component::Prog, Component::Mailbox, Component::ResetGuard, Component::RoT].into_iter().collect();
    if uses_arbiter {
        strong.insert(Component::Arbiter);
    }
    let mut weak: BTreeSet<Component> = [Component::Proc, Component::Mem, Component::Interconnects].into_iter().collect();
    if uses_device {
        weak.insert(Component::Io);
    }
    for g in [Guarantee::C, Guarantee::I, Guarantee::As] {
        report.guarantees.insert(g, TrustSets { strong: strong.clone(), weak: weak.clone() });
    }
    let mut general = strong;
    if cross_session_storage {
        general.insert(Component::Rm);
        general.insert(Component::Sd);
    }
    report.guarantees.insert(Guarantee::Ag, TrustSets { strong: general, weak });
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{TEE1, TEE2};

    fn verified(tick: u64, d: DomainId, r: u8) -> TraceEvent {
        TraceEvent {
            tick,
            event: EventKind::SessionVerified,
            domain: Some(d),
            mailbox: None,
            detail: format!("resource {r:#04x}"),
        }
    }

    #[test]
    fn empty_trace_gives_empty_sets() {
        let r = tcb_report(&[], &MachineManifest::default_machine());
        assert!(r.is_empty());
    }

    #[test]
    fn ui_and_network_match_the_session_line() {
        let trace = vec![
            verified(1, TEE1, resource::SERIAL_OUT),
            verified(2, TEE1, resource::NETWORK),
        ];
        let r = tcb_report(&trace, &MachineManifest::default_machine());
        let want: BTreeSet<Component> =
            [Component::Prog, Component::Mailbox, Component::ResetGuard, Component::Arbiter, Component::RoT]
                .into_iter()
                .collect();
        for g in Guarantee::ALL {
            assert_eq!(r.strong(g), want, "{g:?}");
        }
        assert!(r.weak(Guarantee::C).contains(&Component::Io));
    }

    #[test]
    fn repeated_storage_adds_rm_and_sd_to_ag_only() {
        let trace = vec![verified(1, TEE2, resource::STORAGE), verified(9, TEE2, resource::STORAGE)];
        let r = tcb_report(&trace, &MachineManifest::default_machine());
        assert!(r.strong(Guarantee::Ag).contains(&Component::Rm));
        assert!(r.strong(Guarantee::Ag).contains(&Component::Sd));
        assert!(!r.strong(Guarantee::C).contains(&Component::Rm));
        assert!(!r.strong(Guarantee::C).contains(&Component::Arbiter));
    }

    #[test]
    fn untrusted_sessions_do_not_count() {
        let trace = vec![verified(1, DomainId(7), resource::STORAGE)];
        assert!(tcb_report(&trace, &MachineManifest::default_machine()).is_empty());
    }

    #[test]
    fn display_groups_equal_guarantees() {
        let trace = vec![verified(1, TEE1, resource::NETWORK)];
        let s = tcb_report(&trace, &MachineManifest::default_machine()).to_string();
        assert!(s.starts_with("Owner ⊤{C,I,As,Ag} s:{Prog,mailbox,reset-guard,arbiter,RoT}"), "{s}");
    }
}
