//! Executes a [`Scenario`]: the simulator, roster, super-peer cluster,
//! repository, transaction engine and client traffic wired together.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scenario::{Coordination, FaultEntry, IdentityMode, PlacementMode, Scenario};
use crate::dvsp::{Dvsp, DvspConfig};
use crate::identity::{provisioning_success_rate, ProvisioningScheme, TrustGraph};
use crate::peers::{ClusterId, PeerProfile, PeerState, ReliabilityParams, Roster, Thresholds};
use crate::services::{demand_stream, place_push_pull, CodeBlob, DemandStats, Dsr, PlacementConfig, ServiceDescriptor, ServiceId, WorkloadRequest};
use crate::simnet::topology::{generate_topology, Topology};
use crate::simnet::{EventBody, Fault, NodeId, Partition, Sim, SimStats, SimTime, Trace};
use crate::transactions::{AuditReport, TxnConfig, TxnEngine, TxnMsg};

/// Most attempts a client makes for one request.
pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum WorldMsg {
    Txn(TxnMsg),
    Request {
        req: u64,
    },
    Reply {
        req: u64,
    },
    Probe {
        nonce: u64,
    },
    ProbeAck {
        nonce: u64,
    },
    /// Relay hop toward a NAT-flagged node.
    Forward {
        to: NodeId,
        inner: Box<WorldMsg>,
    },
    RequestTimer,
    AttemptTimer {
        req: u64,
    },
    ProbeTimer,
    ProbeCheck {
        nonce: u64,
    },
}

impl From<TxnMsg> for WorldMsg {
    fn from(m: TxnMsg) -> Self {
        WorldMsg::Txn(m)
    }
}

/// Hourly snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub at: u64,
    pub online_fraction: f64,
    pub coverage: f64,
    pub provisioning: f64,
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: Scenario,
    pub trace: Trace,
    pub samples: Vec<Sample>,
    pub stats: SimStats,
    pub audit: AuditReport,
    pub protocol_violations: Vec<String>,
    pub quiescent: bool,
    pub states: BTreeMap<ServiceId, BTreeMap<String, i64>>,
    pub elections: u64,
    pub demotions: u64,
    pub members: BTreeSet<NodeId>,
    pub topology: Topology,
}

impl RunOutput {
    /// Atomicity, consistency and protocol violations together.
    pub fn violation_count(&self) -> usize {
        self.audit.atomicity_violations.len() + self.audit.consistency_violations.len() + self.protocol_violations.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Task {
    Hour,
    Maintenance { periodic: bool },
    Workflow(usize),
    Demand(usize),
}

#[derive(Debug, Clone)]
struct PendingRequest {
    client: NodeId,
    issued: u64,
    targets: Vec<NodeId>,
    attempts: u32,
}

struct World {
    sc: Scenario,
    sim: Sim<WorldMsg>,
    roster: Roster,
    dvsp: Option<Dvsp>,
    dsr: Dsr,
    engine: TxnEngine,
    topology: Topology,
    trust: TrustGraph,
    agenda: BTreeMap<(u64, u64), Task>,
    agenda_seq: u64,
    samples: Vec<Sample>,
    requests: BTreeMap<u64, PendingRequest>,
    next_req: u64,
    probes: BTreeMap<u64, (NodeId, NodeId)>,
    next_nonce: u64,
    workload: Vec<WorkloadRequest>,
    demand: DemandStats,
    instantiated: BTreeSet<(ServiceId, NodeId)>,
}

pub fn run(sc: &Scenario) -> RunOutput {
    let mut w = World::new(sc.clone());
    w.start();
    w.main_loop();
    w.finish()
}

fn offset(i: u32, interval: u64) -> u64 {
    1 + (u64::from(i) * 7_919) % interval.max(1)
}

impl World {
    fn new(sc: Scenario) -> Self {
        let c = &sc.config;
        let mut sim = Sim::new(c.link(), c.seed).expect("validated link model");
        sim.set_message_tracing(c.trace_messages);
        let mut roster = Roster::new(ReliabilityParams::default());
        for p in &sc.peers {
            sim.add_node(p.nat);
            roster.insert(PeerProfile::new(p.id, p.windows.clone(), p.capacity, p.nat).expect("validated peer"));
        }
        let n = sc.peers.len();
        let topology = if n >= 2 {
            generate_topology(c.topology, n, c.seed).expect("validated topology")
        } else {
            Topology::empty(n)
        };
        let mut trust = TrustGraph::with_nodes(sc.peers.iter().map(|p| p.id));
        for t in &sc.trust {
            trust.attest(t.from, t.to, t.weight).expect("validated trust edge");
        }
        let dvsp = (c.coordination == Coordination::Dvsp).then(|| {
            Dvsp::new(
                DvspConfig {
                    thresholds: Thresholds {
                        a_min: c.a_min,
                        r_min: c.r_min,
                    },
                    min_redundancy: c.min_redundancy,
                    coverage_target: c.coverage_target,
                    max_cluster_size: c.max_cluster,
                    min_members: c.min_members,
                    maintenance_period: c.maintenance_period,
                    electorate: c.electorate,
                },
                ClusterId(0),
            )
        });
        let workload = if c.workload_requests > 0 && !sc.services.is_empty() && n > 0 {
            let ids: Vec<ServiceId> = sc.services.iter().map(|s| s.id.clone()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x5eed_da7a);
            demand_stream(&topology, &ids, c.workload_requests, c.duration, &mut rng)
        } else {
            Vec::new()
        };
        let engine = TxnEngine::new(TxnConfig::for_link(c.link().max_delay()));
        Self {
            dsr: Dsr::new(c.replication),
            sim,
            roster,
            dvsp,
            engine,
            topology,
            trust,
            agenda: BTreeMap::new(),
            agenda_seq: 0,
            samples: Vec::new(),
            requests: BTreeMap::new(),
            next_req: 0,
            probes: BTreeMap::new(),
            next_nonce: 0,
            workload,
            demand: DemandStats::default(),
            instantiated: BTreeSet::new(),
            sc,
        }
    }

    fn now(&self) -> u64 {
        self.sim.now().ticks()
    }

    fn push_task(&mut self, at: u64, task: Task) {
        if at < self.sc.config.duration {
            self.agenda.insert((at, self.agenda_seq), task);
            self.agenda_seq += 1;
        }
    }

    fn nodes(&self) -> Vec<NodeId> {
        self.sim.nodes().collect()
    }

    fn server(&self) -> NodeId {
        NodeId(self.sc.config.server)
    }

    fn repository_nodes(&self) -> Vec<NodeId> {
        match &self.dvsp {
            Some(d) => d.cluster.members.iter().copied().collect(),
            None => vec![self.server()],
        }
    }

    fn is_repository(&self, n: NodeId) -> bool {
        match &self.dvsp {
            Some(d) => d.cluster.members.contains(&n),
            None => n == self.server(),
        }
    }

    fn start(&mut self) {
        let c = self.sc.config.clone();
        if c.duration == 0 {
            return;
        }
        self.apply_schedule();
        if let Some(d) = self.dvsp.as_mut() {
            let _ = d.elect(&mut self.roster, SimTime::ZERO, self.sim.trace_mut());
        }
        self.reassign_relays();
        let members = self.repository_nodes();
        for s in self.sc.services.clone() {
            let blob = CodeBlob::synthetic(s.id.as_str(), s.chunks);
            let d = ServiceDescriptor::for_blob(s.id.clone(), s.tags.iter().cloned(), 1, &blob);
            if let Err(e) = self.dsr.publish(&mut self.sim, &members, d, blob) {
                self.sim.record(None, "WARN", format!("publish service={} error={e}", s.id));
            }
            self.engine.add_service(s.id.clone(), s.host, s.init.clone());
        }
        self.sample();
        for f in self.sc.faults.clone() {
            match f {
                FaultEntry::Crash { node, at, recover } => {
                    self.sim.schedule_fault(SimTime(at), Fault::Crash(node)).expect("validated fault");
                    if let Some(r) = recover {
                        self.sim.schedule_fault(SimTime(r), Fault::Recover(node)).expect("validated fault");
                    }
                }
                FaultEntry::Partition { groups, at, until } => {
                    let p = Partition::new(groups, SimTime(at), SimTime(until)).expect("validated partition");
                    self.sim.schedule_fault(SimTime(at), Fault::Partition(p)).expect("validated partition");
                }
            }
        }
        self.push_task(3_600, Task::Hour);
        if self.dvsp.is_some() {
            self.push_task(c.maintenance_period, Task::Maintenance { periodic: true });
        }
        for (i, w) in self.sc.workflows.clone().iter().enumerate() {
            self.push_task(w.start, Task::Workflow(i));
        }
        for i in 0..self.workload.len() {
            self.push_task(self.workload[i].at.ticks(), Task::Demand(i));
        }
        for n in self.nodes() {
            self.arm_node(n);
        }
    }

    fn arm_node(&mut self, n: NodeId) {
        let c = &self.sc.config;
        let (ri, pi) = (c.request_interval, c.probe_interval);
        if ri > 0 && self.is_client(n) {
            let _ = self.sim.set_timer(n, offset(n.0, ri), WorldMsg::RequestTimer);
        }
        if pi > 0 {
            let _ = self.sim.set_timer(n, offset(n.0 + 1, pi), WorldMsg::ProbeTimer);
        }
    }

    fn is_client(&self, n: NodeId) -> bool {
        self.dvsp.is_some() || n != self.server()
    }

    fn main_loop(&mut self) {
        let duration = SimTime(self.sc.config.duration);
        loop {
            let next = self.agenda.keys().next().map(|(t, _)| SimTime(*t)).unwrap_or(duration);
            if let Some(ev) = self.sim.next_event(next) {
                self.handle(ev.body);
                continue;
            }
            if next >= duration {
                break;
            }
            self.sim.advance_to(next);
            let key = *self.agenda.keys().next().expect("agenda entry");
            let task = self.agenda.remove(&key).expect("agenda entry");
            self.run_task(task);
        }
        self.sim.advance_to(duration);
    }

    fn finish(self) -> RunOutput {
        let states = self.engine.coordinators().map(|c| (c.service.clone(), c.state().clone())).collect();
        let (elections, demotions, members) = match &self.dvsp {
            Some(d) => (d.elections, d.demotions, d.cluster.members.clone()),
            None => (0, 0, BTreeSet::from([self.server()])),
        };
        RunOutput {
            audit: self.engine.audit(),
            protocol_violations: self.engine.protocol_violations().to_vec(),
            quiescent: self.engine.is_quiescent(),
            stats: self.sim.stats(),
            trace: self.sim.into_trace(),
            samples: self.samples,
            states,
            elections,
            demotions,
            members,
            topology: self.topology,
            scenario: self.sc,
        }
    }

    fn run_task(&mut self, task: Task) {
        match task {
            Task::Hour => {
                self.apply_schedule();
                self.reassign_relays();
                self.sample();
                let next = self.now() + 3_600;
                self.push_task(next, Task::Hour);
            }
            Task::Maintenance { periodic } => {
                self.maintain();
                if periodic {
                    let next = self.now() + self.sc.config.maintenance_period;
                    self.push_task(next, Task::Maintenance { periodic: true });
                }
            }
            Task::Workflow(i) => self.start_workflow(i),
            Task::Demand(i) => self.serve_demand(i),
        }
    }

    /// Applies availability windows for the current hour.
    fn apply_schedule(&mut self) {
        let now = self.sim.now();
        for p in self.sc.peers.clone() {
            let on = self.roster.get(p.id).is_some_and(|x| x.is_scheduled(now));
            let _ = self.sim.set_available(p.id, on);
        }
    }

    fn reassign_relays(&mut self) {
        let now = self.sim.now();
        let relays: BTreeMap<NodeId, Option<NodeId>> = match &self.dvsp {
            Some(d) => d.assign_relays(&self.roster, now),
            None => {
                let s = self.server();
                self.roster.profiles().filter(|p| p.nat).map(|p| (p.id, Some(s))).collect()
            }
        };
        for (n, r) in relays {
            let _ = self.sim.set_relay(n, r);
        }
    }

    fn sample(&mut self) {
        let now = self.sim.now();
        let nodes = self.nodes();
        let n = nodes.len().max(1) as f64;
        let online = nodes.iter().filter(|x| self.sim.is_online(**x)).count() as f64 / n;
        let coverage = match &self.dvsp {
            Some(d) => d.coverage(&self.roster),
            None => self
                .roster
                .get(self.server())
                .map_or(0.0, |p| if p.state == PeerState::Offline { 0.0 } else { p.availability() }),
        };
        let c = &self.sc.config;
        let scheme = match c.identity {
            IdentityMode::Cip => ProvisioningScheme::Cip { authority: self.server() },
            IdentityMode::Dip => ProvisioningScheme::dip(c.dip_quorum, c.dip_threshold, c.dip_depth),
        };
        let principals: Vec<NodeId> = nodes.iter().copied().filter(|x| *x != self.server()).collect();
        let sim = &self.sim;
        let provisioning = provisioning_success_rate(&principals, &scheme, &self.trust, self.server(), now, &|x| sim.is_online(x));
        self.samples.push(Sample {
            at: now.ticks(),
            online_fraction: online,
            coverage,
            provisioning,
        });
    }

    fn maintain(&mut self) {
        let now = self.sim.now();
        let Some(d) = self.dvsp.as_mut() else { return };
        let before = d.cluster.members.clone();
        d.maintenance_pass(&mut self.roster, now, self.sim.trace_mut());
        let after = d.cluster.members.clone();
        if after != before {
            self.dsr.sync_index(after);
            self.reassign_relays();
        }
    }

    fn handle(&mut self, body: EventBody<WorldMsg>) {
        match body {
            EventBody::Deliver(m) => self.on_message(m.src, m.dst, m.payload),
            EventBody::Timer { node, tag, .. } => self.on_timer(node, tag),
            EventBody::Crash(n) => {
                self.roster.set_state(n, PeerState::Offline);
                self.engine.on_crash(n);
                self.requests.retain(|_, r| r.client != n);
                self.probes.retain(|_, (p, _)| *p != n);
            }
            EventBody::Recover(n) => {
                let state = match &self.dvsp {
                    Some(d) if d.cluster.members.contains(&n) => PeerState::SuperPeerMember(d.cluster.cluster_id),
                    _ => PeerState::Regular,
                };
                self.roster.set_state(n, state);
                self.engine.on_recover(&mut self.sim, n);
                self.arm_node(n);
            }
            _ => {}
        }
    }

    /// Sends to `dst`, through its relay when `dst` sits behind NAT.
    fn send_to(&mut self, src: NodeId, dst: NodeId, kind: &str, msg: WorldMsg) {
        if src != dst && self.sim.is_nat(dst) {
            match self.sim.relay_of(dst) {
                Some(r) if r != src => {
                    let _ = self.sim.send(
                        src,
                        r,
                        "fwd",
                        WorldMsg::Forward {
                            to: dst,
                            inner: Box::new(msg),
                        },
                    );
                    return;
                }
                Some(_) => {}
                None => return,
            }
        }
        let _ = self.sim.send(src, dst, kind, msg);
    }

    fn on_message(&mut self, src: NodeId, dst: NodeId, msg: WorldMsg) {
        match msg {
            WorldMsg::Txn(t) => self.engine.on_message(&mut self.sim, dst, t),
            WorldMsg::Request { req } => {
                if self.is_repository(dst) {
                    self.send_to(dst, src, "rep", WorldMsg::Reply { req });
                }
            }
            WorldMsg::Reply { req } => {
                if self.requests.get(&req).is_some_and(|r| r.client == dst) {
                    let r = self.requests.remove(&req).expect("pending request");
                    self.resolve(req, &r, true);
                }
            }
            WorldMsg::Probe { nonce } => self.send_to(dst, src, "ack", WorldMsg::ProbeAck { nonce }),
            WorldMsg::ProbeAck { nonce } => {
                if let Some((prober, target)) = self.probes.remove(&nonce) {
                    if prober == dst {
                        let _ = self.roster.observe(prober, target, true, self.sim.now());
                    }
                }
            }
            WorldMsg::Forward { to, inner } if self.sim.relay_of(to) == Some(dst) => {
                let _ = self.sim.send(dst, to, "fwd", *inner);
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, node: NodeId, tag: WorldMsg) {
        match tag {
            WorldMsg::Txn(t) => self.engine.on_message(&mut self.sim, node, t),
            WorldMsg::RequestTimer => {
                if self.sim.is_online(node) {
                    self.issue_request(node);
                }
                let _ = self.sim.set_timer(node, self.sc.config.request_interval, WorldMsg::RequestTimer);
            }
            WorldMsg::AttemptTimer { req } => {
                let Some(r) = self.requests.get_mut(&req) else { return };
                if r.attempts >= MAX_ATTEMPTS {
                    let r = self.requests.remove(&req).expect("pending request");
                    self.resolve(req, &r, false);
                } else {
                    self.attempt(req);
                }
            }
            WorldMsg::ProbeTimer => {
                if self.sim.is_online(node) {
                    self.probe_round(node);
                }
                let _ = self.sim.set_timer(node, self.sc.config.probe_interval, WorldMsg::ProbeTimer);
            }
            WorldMsg::ProbeCheck { nonce } => {
                let Some((prober, target)) = self.probes.remove(&nonce) else { return };
                let now = self.sim.now();
                let still_scheduled = self.roster.get(target).is_some_and(|p| p.is_scheduled(now));
                if still_scheduled {
                    let _ = self.roster.observe(prober, target, false, now);
                    if self.dvsp.as_ref().is_some_and(|d| d.cluster.members.contains(&target)) {
                        let t = self.now();
                        if !self
                            .agenda
                            .iter()
                            .any(|((at, _), task)| *at == t && matches!(task, Task::Maintenance { periodic: false }))
                        {
                            self.push_task(t, Task::Maintenance { periodic: false });
                        }
                    }
                }
            }
            _ => {}
        }
    }

    fn probe_round(&mut self, prober: NodeId) {
        if self.sim.is_nat(prober) && !self.sim.relay_of(prober).is_some_and(|r| self.sim.is_online(r)) {
            return;
        }
        let now = self.sim.now();
        let mut targets: BTreeSet<NodeId> = self.topology.neighbors(prober.0).map(NodeId).collect();
        if let Some(d) = &self.dvsp {
            targets.extend(d.cluster.members.iter().copied());
        }
        targets.remove(&prober);
        let hops = if self.sim.is_nat(prober) { 3 } else { 2 };
        let wait = hops * self.sc.config.link().max_delay() + 1;
        for t in targets {
            let scheduled = self.roster.get(t).is_some_and(|p| p.is_scheduled(now));
            if !scheduled || (self.sim.is_nat(t) && self.sim.relay_of(t) != Some(prober)) {
                continue;
            }
            let nonce = self.next_nonce;
            self.next_nonce += 1;
            self.probes.insert(nonce, (prober, t));
            let _ = self.sim.send(prober, t, "probe", WorldMsg::Probe { nonce });
            let _ = self.sim.set_timer(prober, wait, WorldMsg::ProbeCheck { nonce });
        }
    }

    fn issue_request(&mut self, client: NodeId) {
        let now = self.sim.now();
        let req = self.next_req;
        self.next_req += 1;
        let mut targets: Vec<NodeId> = match &self.dvsp {
            Some(d) => d
                .cluster
                .members
                .iter()
                .copied()
                .filter(|m| *m != client && self.roster.get(*m).is_some_and(|p| p.is_scheduled(now)))
                .collect(),
            None => vec![self.server()],
        };
        if !targets.is_empty() {
            let k = (client.0 as usize + req as usize) % targets.len();
            targets.rotate_left(k);
        }
        let r = PendingRequest {
            client,
            issued: now.ticks(),
            targets,
            attempts: 0,
        };
        if r.targets.is_empty() {
            let local = self.is_repository(client);
            self.resolve(req, &r, local);
            return;
        }
        self.requests.insert(req, r);
        self.attempt(req);
    }

    fn attempt(&mut self, req: u64) {
        let wait = 3 * self.sc.config.link().max_delay() + 1;
        let r = self.requests.get_mut(&req).expect("pending request");
        let target = r.targets[r.attempts as usize % r.targets.len()];
        r.attempts += 1;
        let client = r.client;
        let _ = self.sim.send(client, target, "req", WorldMsg::Request { req });
        let _ = self.sim.set_timer(client, wait, WorldMsg::AttemptTimer { req });
    }

    fn resolve(&mut self, req: u64, r: &PendingRequest, ok: bool) {
        let latency = self.now() - r.issued;
        self.sim.record(
            Some(r.client),
            "REQ",
            format!(
                "req={req} issued={} ok={} latency={latency} attempts={}",
                r.issued,
                u8::from(ok),
                r.attempts
            ),
        );
    }

    fn start_workflow(&mut self, i: usize) {
        let spec = self.sc.workflows[i].clone();
        let wf = spec.to_workflow(&self.sc.config);
        for step in &wf.steps {
            let Some(s) = self.sc.services.iter().find(|s| s.id == step.service).cloned() else {
                continue;
            };
            if self.instantiated.contains(&(s.id.clone(), s.host)) {
                continue;
            }
            let cap = self.sc.peers[s.host.0 as usize].capacity;
            match self.dsr.instantiate(&mut self.sim, &s.id, s.host, cap) {
                Ok(_) => {
                    self.instantiated.insert((s.id.clone(), s.host));
                }
                Err(e) => {
                    self.sim
                        .record(Some(wf.initiator), "BEGINFAIL", format!("txn={} service={} reason={e}", wf.txn_id, s.id));
                    return;
                }
            }
        }
        let txn = wf.txn_id;
        let init = wf.initiator;
        if let Err(e) = self.engine.begin(&mut self.sim, wf) {
            self.sim.record(Some(init), "BEGINFAIL", format!("txn={txn} reason={e}"));
        }
    }

    fn serve_demand(&mut self, i: usize) {
        let r = self.workload[i].clone();
        let now = self.sim.now();
        let holders: Vec<NodeId> = self.dsr.replicas(&r.service).into_iter().filter(|h| self.sim.is_online(*h)).collect();
        let dist = self.topology.distances_from(r.node.0);
        let hops = holders.iter().filter_map(|h| dist[h.0 as usize]).min();
        let base = self.sc.config.base_latency;
        let detail = match hops {
            Some(h) => format!("service={} hops={h} latency={}", r.service, h as u64 * base),
            None => format!("service={} unreachable=1", r.service),
        };
        self.sim.record(Some(r.node), "REQUEST", detail);
        self.demand.record(&r.service, r.node, now);
        if self.sc.config.placement == PlacementMode::Hybrid {
            let cfg = PlacementConfig {
                window: self.sc.config.placement_window,
                push_threshold: self.sc.config.push_threshold,
                r_push: self.sc.config.r_push,
            };
            for a in place_push_pull(&self.dsr, &self.demand, now, &cfg) {
                self.dsr.apply_push(self.sim.trace_mut(), now, &a);
            }
        }
    }
}
