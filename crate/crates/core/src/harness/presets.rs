//! Bundled experiment scenarios.

use std::collections::{BTreeMap, BTreeSet};

use super::scenario::{Coordination, FaultEntry, IdentityMode, PeerSpec, PlacementMode, Scenario, ServiceSpec, StepSpec, TrustSpec, WorkflowSpec};
use crate::dvsp::ElectorateRule;
use crate::peers::AvailabilityWindow;
use crate::services::ServiceId;
use crate::simnet::topology::TopologyKind;
use crate::simnet::NodeId;
use crate::transactions::{default_timeout, Delta, TxnMode};

pub const PRESET_NAMES: [&str; 7] = [
    "spof_centralised",
    "spof_dvsp",
    "fig5_coverage",
    "fragmentation",
    "keystone",
    "sme_smallworld",
    "pushpull_workload",
];

pub fn preset(name: &str) -> Option<Scenario> {
    Some(match name {
        "spof_centralised" => spof_centralised(),
        "spof_dvsp" => spof_dvsp(),
        "fig5_coverage" => fig5_coverage(),
        "fragmentation" => fragmentation(),
        "keystone" => keystone(),
        "sme_smallworld" => sme_smallworld(),
        "pushpull_workload" => pushpull_workload(),
        _ => return None,
    })
}

pub fn all() -> Vec<Scenario> {
    PRESET_NAMES.iter().filter_map(|n| preset(n)).collect()
}

fn base(name: &str, n: u32) -> Scenario {
    let mut sc = Scenario::default();
    sc.config.name = name.into();
    sc.config.seed = 1;
    sc.config.r_min = 0.5;
    sc.peers = (0..n).map(PeerSpec::always).collect();
    sc
}

/// Each node trusts its two neighbours on either side of a ring.
fn ring_trust(n: u32, weight: f64) -> Vec<TrustSpec> {
    let mut out = Vec::new();
    for i in 0..n {
        for d in [1, 2, n - 1, n - 2] {
            let j = (i + d) % n;
            if j != i && !out.iter().any(|t: &TrustSpec| t.from.0 == i && t.to.0 == j) {
                out.push(TrustSpec {
                    from: NodeId(i),
                    to: NodeId(j),
                    weight,
                });
            }
        }
    }
    out
}

fn catalogue(count: usize, host: NodeId) -> Vec<ServiceSpec> {
    (0..count)
        .map(|i| ServiceSpec {
            id: ServiceId::new(format!("svc{i}")),
            tags: BTreeSet::from(["catalogue".to_string(), format!("kind{}", i % 3)]),
            chunks: 4,
            host,
            init: BTreeMap::from([("bal".to_string(), 1_000)]),
        })
        .collect()
}

/// All services on server 0, which crashes half way through the day.
pub fn spof_centralised() -> Scenario {
    let mut sc = base("spof_centralised", 8);
    sc.config.coordination = Coordination::Centralised;
    sc.config.server = 0;
    sc.config.identity = IdentityMode::Cip;
    sc.trust = ring_trust(8, 0.9);
    sc.services = catalogue(3, NodeId(0));
    sc.faults = vec![FaultEntry::Crash {
        node: NodeId(0),
        at: 43_200,
        recover: None,
    }];
    sc
}

/// Three-member super-peer cluster with five eligible spares, two of them
/// behind NAT; node 0 crashes half way through the day.
pub fn spof_dvsp() -> Scenario {
    let mut sc = base("spof_dvsp", 8);
    sc.config.max_cluster = 3;
    sc.config.min_members = 3;
    sc.trust = ring_trust(8, 0.9);
    for p in &mut sc.peers[6..] {
        p.nat = true;
    }
    sc.services = catalogue(3, NodeId(1));
    sc.faults = vec![FaultEntry::Crash {
        node: NodeId(0),
        at: 43_200,
        recover: None,
    }];
    sc
}

/// Three peers online 0-8, 8-16 and 16-24 over three days.
pub fn fig5_coverage() -> Scenario {
    let mut sc = base("fig5_coverage", 3);
    sc.config.duration = 3 * 86_400;
    sc.config.electorate = ElectorateRule::All;
    sc.config.max_cluster = 3;
    for (i, p) in sc.peers.iter_mut().enumerate() {
        let s = 8 * i as u8;
        p.windows = vec![AvailabilityWindow::hours(s, s + 8).expect("valid window")];
    }
    sc.services = catalogue(1, NodeId(0));
    sc
}

/// Strict three-step chain started at t=100; node 1 is cut off from t=300,
/// after its own step ran and before Prepare can reach it.
pub fn fragmentation() -> Scenario {
    let mut sc = base("fragmentation", 4);
    sc.config.duration = 14_400;
    sc.services = (0..3)
        .map(|i| ServiceSpec {
            id: ServiceId::new(format!("s{i}")),
            tags: BTreeSet::from(["ledger".to_string()]),
            chunks: 2,
            host: NodeId(i + 1),
            init: BTreeMap::from([("bal".to_string(), 100)]),
        })
        .collect();
    sc.workflows = vec![WorkflowSpec {
        txn_id: 1,
        initiator: NodeId(0),
        start: 100,
        mode: TxnMode::Strict,
        timeout: 0,
        steps: (0..3)
            .map(|i| StepSpec {
                id: i,
                service: ServiceId::new(format!("s{i}")),
                after: if i == 0 { BTreeSet::new() } else { BTreeSet::from([i - 1]) },
                effect: Delta::new("bal", -10),
                fail: false,
            })
            .collect(),
    }];
    let timeout = default_timeout(sc.config.base_latency, 3);
    sc.faults = vec![FaultEntry::Partition {
        groups: vec![BTreeSet::from([NodeId(1)]), BTreeSet::from([NodeId(0), NodeId(2), NodeId(3)])],
        at: 300,
        until: 300 + timeout + 500,
    }];
    sc
}

fn office_hours(sc: &mut Scenario) {
    for (i, p) in sc.peers.iter_mut().enumerate().skip(1) {
        if i % 4 == 3 {
            p.windows = vec![AvailabilityWindow::hours(6, 22).expect("valid window")];
        }
    }
}

/// Hub-and-spoke ecosystem around one large firm.
pub fn keystone() -> Scenario {
    let mut sc = base("keystone", 20);
    sc.config.topology = TopologyKind::Keystone;
    sc.config.coordination = Coordination::Centralised;
    sc.trust = ring_trust(20, 0.8);
    office_hours(&mut sc);
    sc.services = catalogue(4, NodeId(0));
    sc
}

/// Network of peer SMEs in a small-world graph.
pub fn sme_smallworld() -> Scenario {
    let mut sc = base("sme_smallworld", 20);
    sc.config.topology = TopologyKind::SmallWorld { k: 4, p: 0.1 };
    sc.trust = ring_trust(20, 0.8);
    office_hours(&mut sc);
    sc.services = catalogue(4, NodeId(1));
    sc
}

/// 400 placement requests over four hours against six services.
pub fn pushpull_workload() -> Scenario {
    let mut sc = base("pushpull_workload", 30);
    sc.config.duration = 4 * 3_600;
    sc.config.topology = TopologyKind::SmallWorld { k: 4, p: 0.1 };
    sc.config.placement = PlacementMode::Hybrid;
    sc.config.replication = 1;
    sc.config.workload_requests = 400;
    sc.config.request_interval = 0;
    sc.config.probe_interval = 0;
    sc.services = catalogue(6, NodeId(1));
    sc
}
