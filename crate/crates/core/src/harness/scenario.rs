//! Line-oriented scenario files.
//!
//! ```text
//! [config]
//! name=demo
//! seed=7
//! [peers]
//! peer 0 windows=always nat=0
//! peer 1 windows=8-16,22-4w nat=1
//! [trust]
//! trust 0 1 0.9
//! [services]
//! service pay tags=pay,eu chunks=4 host=0 init=bal:100
//! [workflows]
//! workflow 1 initiator=1 start=100 mode=strict timeout=0
//! step 0 service=pay after= effect=bal+=-10
//! [faults]
//! crash 0 at=500 recover=900
//! partition 0|1 at=1000 until=2000
//! ```
//!
//! [`Scenario::write`] emits every setting, defaults included, and
//! [`Scenario::parse`] reads it back unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::dvsp::ElectorateRule;
use crate::peers::{AvailabilityWindow, Capacity};
use crate::services::ServiceId;
use crate::simnet::topology::{generate_topology, TopologyKind};
use crate::simnet::{LinkModel, NodeId};
use crate::transactions::{Delta, Step, TxnMode, Workflow};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("{0}")]
    Io(String),
}

impl ScenarioError {
    fn validation(field: &str, reason: String) -> Self {
        Self::Validation {
            field: field.to_string(),
            reason,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordination {
    /// One server node holds the repository and answers every request.
    Centralised,
    /// An elected super-peer cluster.
    Dvsp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityMode {
    Cip,
    Dip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementMode {
    Pull,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub duration: u64,
    pub topology: TopologyKind,
    pub base_latency: u64,
    pub jitter_max: u64,
    pub coordination: Coordination,
    pub server: u32,
    pub electorate: ElectorateRule,
    pub a_min: f64,
    pub r_min: f64,
    pub max_cluster: usize,
    pub min_members: usize,
    pub min_redundancy: u32,
    pub coverage_target: f64,
    pub maintenance_period: u64,
    pub txn_mode: TxnMode,
    /// 0 selects `10 · base_latency · steps`.
    pub txn_timeout: u64,
    pub replication: usize,
    /// 0 disables client requests.
    pub request_interval: u64,
    /// 0 disables reliability probes.
    pub probe_interval: u64,
    pub metrics_window: u64,
    pub identity: IdentityMode,
    pub dip_quorum: usize,
    pub dip_threshold: f64,
    pub dip_depth: usize,
    pub placement: PlacementMode,
    pub push_threshold: usize,
    pub r_push: usize,
    pub placement_window: u64,
    pub workload_requests: usize,
    pub trace_messages: bool,
    /// Metric names to report; empty means all.
    pub metrics: Vec<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let link = LinkModel::default();
        Self {
            name: "scenario".into(),
            seed: 0,
            duration: 86_400,
            topology: TopologyKind::Complete,
            base_latency: link.base_latency,
            jitter_max: link.jitter_max,
            coordination: Coordination::Dvsp,
            server: 0,
            electorate: ElectorateRule::Online,
            a_min: 0.25,
            r_min: 0.6,
            max_cluster: 7,
            min_members: 3,
            min_redundancy: 1,
            coverage_target: 1.0,
            maintenance_period: 3_600,
            txn_mode: TxnMode::Strict,
            txn_timeout: 0,
            replication: 3,
            request_interval: 300,
            probe_interval: 600,
            metrics_window: 3_600,
            identity: IdentityMode::Dip,
            dip_quorum: 2,
            dip_threshold: 0.5,
            dip_depth: 3,
            placement: PlacementMode::Pull,
            push_threshold: 5,
            r_push: 2,
            placement_window: 3_600,
            workload_requests: 0,
            trace_messages: false,
            metrics: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn link(&self) -> LinkModel {
        LinkModel {
            base_latency: self.base_latency,
            jitter_max: self.jitter_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeerSpec {
    pub id: NodeId,
    pub windows: Vec<AvailabilityWindow>,
    pub capacity: Capacity,
    pub nat: bool,
}

impl PeerSpec {
    pub fn always(id: u32) -> Self {
        Self {
            id: NodeId(id),
            windows: vec![AvailabilityWindow::always()],
            capacity: Capacity::default(),
            nat: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustSpec {
    pub from: NodeId,
    pub to: NodeId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceSpec {
    pub id: ServiceId,
    pub tags: BTreeSet<String>,
    pub chunks: usize,
    /// Node running the service and its local transaction coordinator.
    pub host: NodeId,
    pub init: BTreeMap<String, i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSpec {
    pub id: u32,
    pub service: ServiceId,
    pub after: BTreeSet<u32>,
    pub effect: Delta,
    pub fail: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowSpec {
    pub txn_id: u64,
    pub initiator: NodeId,
    pub start: u64,
    pub mode: TxnMode,
    /// 0 selects the scenario default.
    pub timeout: u64,
    pub steps: Vec<StepSpec>,
}

impl WorkflowSpec {
    pub fn to_workflow(&self, config: &ScenarioConfig) -> Workflow {
        let timeout = match (self.timeout, config.txn_timeout) {
            (0, 0) => crate::transactions::default_timeout(config.base_latency, self.steps.len()),
            (0, t) | (t, _) => t,
        };
        Workflow {
            txn_id: self.txn_id,
            steps: self
                .steps
                .iter()
                .map(|s| Step {
                    step_id: s.id,
                    service: s.service.clone(),
                    depends_on: s.after.clone(),
                    effect: s.effect.clone(),
                    fail: s.fail,
                })
                .collect(),
            mode: self.mode,
            initiator: self.initiator,
            timeout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultEntry {
    Crash { node: NodeId, at: u64, recover: Option<u64> },
    Partition { groups: Vec<BTreeSet<NodeId>>, at: u64, until: u64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub peers: Vec<PeerSpec>,
    pub trust: Vec<TrustSpec>,
    pub services: Vec<ServiceSpec>,
    pub workflows: Vec<WorkflowSpec>,
    pub faults: Vec<FaultEntry>,
}

fn topology_text(t: &TopologyKind) -> String {
    match t {
        TopologyKind::Keystone => "keystone".into(),
        TopologyKind::Complete => "complete".into(),
        TopologyKind::SmallWorld { k, p } => format!("smallworld({k},{p})"),
        TopologyKind::Random { q } => format!("random({q})"),
    }
}

fn parse_topology(s: &str) -> Result<TopologyKind, String> {
    let bad = || format!("bad topology {s:?}");
    match s {
        "keystone" => return Ok(TopologyKind::Keystone),
        "complete" => return Ok(TopologyKind::Complete),
        _ => {}
    }
    let (kind, rest) = s.split_once('(').ok_or_else(bad)?;
    let args: Vec<&str> = rest.strip_suffix(')').ok_or_else(bad)?.split(',').collect();
    match (kind, args.as_slice()) {
        ("smallworld", [k, p]) => Ok(TopologyKind::SmallWorld {
            k: k.parse().map_err(|_| bad())?,
            p: p.parse().map_err(|_| bad())?,
        }),
        ("random", [q]) => Ok(TopologyKind::Random {
            q: q.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
}

fn flag(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        _ => Err(format!("bad value {v:?} for {key}")),
    }
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').filter(|s| !s.is_empty())
}

impl ScenarioConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "name" => self.name = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "duration" => self.duration = num(key, v)?,
            "topology" => self.topology = parse_topology(v)?,
            "base_latency" => self.base_latency = num(key, v)?,
            "jitter_max" => self.jitter_max = num(key, v)?,
            "coordination" => {
                self.coordination = match v {
                    "centralised" => Coordination::Centralised,
                    "dvsp" => Coordination::Dvsp,
                    _ => return Err(format!("bad coordination {v:?}")),
                }
            }
            "server" => self.server = num(key, v)?,
            "electorate" => {
                self.electorate = match v {
                    "online" => ElectorateRule::Online,
                    "all" => ElectorateRule::All,
                    _ => return Err(format!("bad electorate {v:?}")),
                }
            }
            "a_min" => self.a_min = num(key, v)?,
            "r_min" => self.r_min = num(key, v)?,
            "max_cluster" => self.max_cluster = num(key, v)?,
            "min_members" => self.min_members = num(key, v)?,
            "min_redundancy" => self.min_redundancy = num(key, v)?,
            "coverage_target" => self.coverage_target = num(key, v)?,
            "maintenance_period" => self.maintenance_period = num(key, v)?,
            "txn_mode" => self.txn_mode = parse_mode(v)?,
            "txn_timeout" => self.txn_timeout = num(key, v)?,
            "replication" => self.replication = num(key, v)?,
            "request_interval" => self.request_interval = num(key, v)?,
            "probe_interval" => self.probe_interval = num(key, v)?,
            "metrics_window" => self.metrics_window = num(key, v)?,
            "identity" => {
                self.identity = match v {
                    "cip" => IdentityMode::Cip,
                    "dip" => IdentityMode::Dip,
                    _ => return Err(format!("bad identity {v:?}")),
                }
            }
            "dip_quorum" => self.dip_quorum = num(key, v)?,
            "dip_threshold" => self.dip_threshold = num(key, v)?,
            "dip_depth" => self.dip_depth = num(key, v)?,
            "placement" => {
                self.placement = match v {
                    "pull" => PlacementMode::Pull,
                    "hybrid" => PlacementMode::Hybrid,
                    _ => return Err(format!("bad placement {v:?}")),
                }
            }
            "push_threshold" => self.push_threshold = num(key, v)?,
            "r_push" => self.r_push = num(key, v)?,
            "placement_window" => self.placement_window = num(key, v)?,
            "workload_requests" => self.workload_requests = num(key, v)?,
            "trace_messages" => self.trace_messages = flag(key, v)?,
            "metrics" => self.metrics = split_list(v).map(str::to_string).collect(),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn write(&self, out: &mut String) {
        let c = self;
        let lines: Vec<(&str, String)> = vec![
            ("name", c.name.clone()),
            ("seed", c.seed.to_string()),
            ("duration", c.duration.to_string()),
            ("topology", topology_text(&c.topology)),
            ("base_latency", c.base_latency.to_string()),
            ("jitter_max", c.jitter_max.to_string()),
            (
                "coordination",
                match c.coordination {
                    Coordination::Centralised => "centralised",
                    Coordination::Dvsp => "dvsp",
                }
                .into(),
            ),
            ("server", c.server.to_string()),
            (
                "electorate",
                match c.electorate {
                    ElectorateRule::Online => "online",
                    ElectorateRule::All => "all",
                }
                .into(),
            ),
            ("a_min", c.a_min.to_string()),
            ("r_min", c.r_min.to_string()),
            ("max_cluster", c.max_cluster.to_string()),
            ("min_members", c.min_members.to_string()),
            ("min_redundancy", c.min_redundancy.to_string()),
            ("coverage_target", c.coverage_target.to_string()),
            ("maintenance_period", c.maintenance_period.to_string()),
            ("txn_mode", c.txn_mode.as_str().into()),
            ("txn_timeout", c.txn_timeout.to_string()),
            ("replication", c.replication.to_string()),
            ("request_interval", c.request_interval.to_string()),
            ("probe_interval", c.probe_interval.to_string()),
            ("metrics_window", c.metrics_window.to_string()),
            (
                "identity",
                match c.identity {
                    IdentityMode::Cip => "cip",
                    IdentityMode::Dip => "dip",
                }
                .into(),
            ),
            ("dip_quorum", c.dip_quorum.to_string()),
            ("dip_threshold", c.dip_threshold.to_string()),
            ("dip_depth", c.dip_depth.to_string()),
            (
                "placement",
                match c.placement {
                    PlacementMode::Pull => "pull",
                    PlacementMode::Hybrid => "hybrid",
                }
                .into(),
            ),
            ("push_threshold", c.push_threshold.to_string()),
            ("r_push", c.r_push.to_string()),
            ("placement_window", c.placement_window.to_string()),
            ("workload_requests", c.workload_requests.to_string()),
            ("trace_messages", u8::from(c.trace_messages).to_string()),
            ("metrics", c.metrics.join(",")),
        ];
        for (k, v) in lines {
            let _ = writeln!(out, "{k}={v}");
        }
    }
}

fn parse_mode(v: &str) -> Result<TxnMode, String> {
    match v {
        "strict" => Ok(TxnMode::Strict),
        "relaxed" => Ok(TxnMode::Relaxed),
        _ => Err(format!("bad mode {v:?}")),
    }
}

/// Splits `word k=v k=v` tokens after the leading keyword.
fn tokens<'a>(rest: &[&'a str]) -> Result<Vec<(&'a str, &'a str)>, String> {
    rest.iter()
        .map(|t| t.split_once('=').ok_or_else(|| format!("expected key=value, got {t:?}")))
        .collect()
}

fn node(v: &str) -> Result<NodeId, String> {
    v.parse().map(NodeId).map_err(|_| format!("bad node id {v:?}"))
}

fn parse_peer(words: &[&str]) -> Result<PeerSpec, String> {
    let id = node(words.get(1).ok_or("peer needs an id")?)?;
    let mut p = PeerSpec {
        id,
        windows: vec![AvailabilityWindow::always()],
        capacity: Capacity::default(),
        nat: false,
    };
    for (k, v) in tokens(&words[2..])? {
        match k {
            "windows" if v == "always" => p.windows = vec![AvailabilityWindow::always()],
            "windows" => {
                p.windows = split_list(v)
                    .map(|w| w.parse().map_err(|_| format!("bad window {w:?}")))
                    .collect::<Result<_, _>>()?
            }
            "nat" => p.nat = flag(k, v)?,
            "storage" => p.capacity.storage_units = num(k, v)?,
            "compute" => p.capacity.compute_units = num(k, v)?,
            "upload" => p.capacity.upload_slots = num(k, v)?,
            _ => return Err(format!("unknown key {k:?}")),
        }
    }
    Ok(p)
}

fn write_peer(p: &PeerSpec, out: &mut String) {
    let windows = if p.windows == [AvailabilityWindow::always()] {
        "always".to_string()
    } else {
        join(&p.windows)
    };
    let _ = writeln!(
        out,
        "peer {} windows={windows} nat={} storage={} compute={} upload={}",
        p.id,
        u8::from(p.nat),
        p.capacity.storage_units,
        p.capacity.compute_units,
        p.capacity.upload_slots
    );
}

fn parse_service(words: &[&str], default_host: NodeId) -> Result<ServiceSpec, String> {
    let id = ServiceId::new(*words.get(1).ok_or("service needs an id")?);
    let mut s = ServiceSpec {
        id,
        tags: BTreeSet::new(),
        chunks: 1,
        host: default_host,
        init: BTreeMap::new(),
    };
    for (k, v) in tokens(&words[2..])? {
        match k {
            "tags" => s.tags = split_list(v).map(str::to_lowercase).collect(),
            "chunks" => s.chunks = num(k, v)?,
            "host" => s.host = node(v)?,
            "init" => {
                s.init = split_list(v)
                    .map(|kv| {
                        let (a, b) = kv.split_once(':').ok_or_else(|| format!("bad init entry {kv:?}"))?;
                        Ok((a.to_string(), num::<i64>("init", b)?))
                    })
                    .collect::<Result<_, String>>()?
            }
            _ => return Err(format!("unknown key {k:?}")),
        }
    }
    Ok(s)
}

fn write_service(s: &ServiceSpec, out: &mut String) {
    let init = join(s.init.iter().map(|(k, v)| format!("{k}:{v}")));
    let _ = writeln!(
        out,
        "service {} tags={} chunks={} host={} init={init}",
        s.id,
        join(&s.tags),
        s.chunks,
        s.host
    );
}

fn parse_workflow(words: &[&str]) -> Result<WorkflowSpec, String> {
    let txn_id = num("workflow", words.get(1).ok_or("workflow needs an id")?)?;
    let mut w = WorkflowSpec {
        txn_id,
        initiator: NodeId(0),
        start: 0,
        mode: TxnMode::Strict,
        timeout: 0,
        steps: Vec::new(),
    };
    for (k, v) in tokens(&words[2..])? {
        match k {
            "initiator" => w.initiator = node(v)?,
            "start" => w.start = num(k, v)?,
            "mode" => w.mode = parse_mode(v)?,
            "timeout" => w.timeout = num(k, v)?,
            _ => return Err(format!("unknown key {k:?}")),
        }
    }
    Ok(w)
}

fn parse_step(words: &[&str]) -> Result<StepSpec, String> {
    let id = num("step", words.get(1).ok_or("step needs an id")?)?;
    let mut service = None;
    let mut effect = None;
    let mut after = BTreeSet::new();
    let mut fail = false;
    for t in &words[2..] {
        // `effect=key+=n` holds a second '=', so split on the first only.
        let (k, v) = t.split_once('=').ok_or_else(|| format!("expected key=value, got {t:?}"))?;
        match k {
            "service" => service = Some(ServiceId::new(v)),
            "after" => after = split_list(v).map(|d| num("after", d)).collect::<Result<_, _>>()?,
            "effect" => {
                let (key, amount) = v.split_once("+=").ok_or_else(|| format!("bad effect {v:?}"))?;
                effect = Some(Delta::new(key, num("effect", amount)?));
            }
            "fail" => fail = flag(k, v)?,
            _ => return Err(format!("unknown key {k:?}")),
        }
    }
    Ok(StepSpec {
        id,
        service: service.ok_or("step needs service=")?,
        after,
        effect: effect.ok_or("step needs effect=")?,
        fail,
    })
}

fn write_workflow(w: &WorkflowSpec, out: &mut String) {
    let _ = writeln!(
        out,
        "workflow {} initiator={} start={} mode={} timeout={}",
        w.txn_id,
        w.initiator,
        w.start,
        w.mode.as_str(),
        w.timeout
    );
    for s in &w.steps {
        let _ = writeln!(
            out,
            "step {} service={} after={} effect={}+={} fail={}",
            s.id,
            s.service,
            join(&s.after),
            s.effect.key,
            s.effect.amount,
            u8::from(s.fail)
        );
    }
}

fn parse_fault(words: &[&str]) -> Result<FaultEntry, String> {
    match words[0] {
        "crash" => {
            let n = node(words.get(1).ok_or("crash needs a node")?)?;
            let (mut at, mut recover) = (None, None);
            for (k, v) in tokens(&words[2..])? {
                match k {
                    "at" => at = Some(num(k, v)?),
                    "recover" => recover = Some(num(k, v)?),
                    _ => return Err(format!("unknown key {k:?}")),
                }
            }
            Ok(FaultEntry::Crash {
                node: n,
                at: at.ok_or("crash needs at=")?,
                recover,
            })
        }
        "partition" => {
            let groups = words
                .get(1)
                .ok_or("partition needs groups")?
                .split('|')
                .map(|g| split_list(g).map(node).collect::<Result<BTreeSet<_>, _>>())
                .collect::<Result<Vec<_>, _>>()?;
            let (mut at, mut until) = (None, None);
            for (k, v) in tokens(&words[2..])? {
                match k {
                    "at" => at = Some(num(k, v)?),
                    "until" => until = Some(num(k, v)?),
                    _ => return Err(format!("unknown key {k:?}")),
                }
            }
            Ok(FaultEntry::Partition {
                groups,
                at: at.ok_or("partition needs at=")?,
                until: until.ok_or("partition needs until=")?,
            })
        }
        other => Err(format!("unknown fault {other:?}")),
    }
}

fn write_fault(f: &FaultEntry, out: &mut String) {
    match f {
        FaultEntry::Crash { node, at, recover } => {
            let _ = match recover {
                Some(r) => writeln!(out, "crash {node} at={at} recover={r}"),
                None => writeln!(out, "crash {node} at={at}"),
            };
        }
        FaultEntry::Partition { groups, at, until } => {
            let g = groups.iter().map(join).collect::<Vec<_>>().join("|");
            let _ = writeln!(out, "partition {g} at={at} until={until}");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Config,
    Peers,
    Trust,
    Services,
    Workflows,
    Faults,
}

impl Scenario {
    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc = Scenario::default();
        let mut section = Section::None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |reason: String| ScenarioError::Parse { line: line_no, reason };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name {
                    "config" => Section::Config,
                    "peers" => Section::Peers,
                    "trust" => Section::Trust,
                    "services" => Section::Services,
                    "workflows" => Section::Workflows,
                    "faults" => Section::Faults,
                    _ => return Err(err(format!("unknown section [{name}]"))),
                };
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            match section {
                Section::None => return Err(err("content before the first section".into())),
                Section::Config => {
                    let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
                    sc.config.set(k.trim(), v.trim()).map_err(err)?;
                }
                Section::Peers => match words[0] {
                    "peer" => sc.peers.push(parse_peer(&words).map_err(err)?),
                    w => return Err(err(format!("unknown entry {w:?}"))),
                },
                Section::Trust => match words.as_slice() {
                    ["trust", a, b, w] => sc.trust.push(TrustSpec {
                        from: node(a).map_err(err)?,
                        to: node(b).map_err(err)?,
                        weight: num("trust", w).map_err(err)?,
                    }),
                    _ => return Err(err("expected `trust <from> <to> <weight>`".into())),
                },
                Section::Services => match words[0] {
                    "service" => sc.services.push(parse_service(&words, NodeId(sc.config.server)).map_err(err)?),
                    w => return Err(err(format!("unknown entry {w:?}"))),
                },
                Section::Workflows => match words[0] {
                    "workflow" => sc.workflows.push(parse_workflow(&words).map_err(err)?),
                    "step" => {
                        let step = parse_step(&words).map_err(err)?;
                        sc.workflows
                            .last_mut()
                            .ok_or_else(|| err("step before any workflow".into()))?
                            .steps
                            .push(step);
                    }
                    w => return Err(err(format!("unknown entry {w:?}"))),
                },
                Section::Faults => sc.faults.push(parse_fault(&words).map_err(err)?),
            }
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &std::path::Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Full text including every default.
    pub fn write(&self) -> String {
        let mut out = String::from("[config]\n");
        self.config.write(&mut out);
        out.push_str("[peers]\n");
        for p in &self.peers {
            write_peer(p, &mut out);
        }
        out.push_str("[trust]\n");
        for t in &self.trust {
            let _ = writeln!(out, "trust {} {} {}", t.from, t.to, t.weight);
        }
        out.push_str("[services]\n");
        for s in &self.services {
            write_service(s, &mut out);
        }
        out.push_str("[workflows]\n");
        for w in &self.workflows {
            write_workflow(w, &mut out);
        }
        out.push_str("[faults]\n");
        for f in &self.faults {
            write_fault(f, &mut out);
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.peers.len()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        use ScenarioError as E;
        let v = E::validation;
        let c = &self.config;
        let n = self.peers.len();
        let known = |x: NodeId| (x.0 as usize) < n;
        c.link().validate().map_err(|e| v("link", e.to_string()))?;
        for (field, x) in [
            ("a_min", c.a_min),
            ("r_min", c.r_min),
            ("coverage_target", c.coverage_target),
            ("dip_threshold", c.dip_threshold),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return Err(v(field, format!("{x} outside [0,1]")));
            }
        }
        if c.metrics_window == 0 {
            return Err(v("metrics_window", "must be positive".into()));
        }
        if c.maintenance_period == 0 {
            return Err(v("maintenance_period", "must be positive".into()));
        }
        if c.replication == 0 || c.max_cluster == 0 {
            return Err(v("replication", "replication and max_cluster must be positive".into()));
        }
        if let Some(m) = c.metrics.iter().find(|m| !super::metrics::METRIC_NAMES.contains(&m.as_str())) {
            return Err(v("metrics", format!("unknown metric {m:?}")));
        }
        for (i, p) in self.peers.iter().enumerate() {
            if p.id.0 as usize != i {
                return Err(v("peers", format!("peer ids must be 0..{n} in order, found {} at position {i}", p.id)));
            }
            crate::peers::PeerProfile::new(p.id, p.windows.clone(), p.capacity, p.nat).map_err(|e| v("peers", format!("peer {}: {e}", p.id)))?;
        }
        if n >= 2 {
            generate_topology(c.topology, n, c.seed).map_err(|e| v("topology", e.to_string()))?;
        }
        if c.coordination == Coordination::Centralised && n > 0 && !known(NodeId(c.server)) {
            return Err(v("server", format!("no peer {}", c.server)));
        }
        for t in &self.trust {
            if !known(t.from) || !known(t.to) || t.from == t.to || !(0.0..=1.0).contains(&t.weight) {
                return Err(v("trust", format!("bad edge {} -> {} ({})", t.from, t.to, t.weight)));
            }
        }
        let mut ids = BTreeSet::new();
        for s in &self.services {
            if !ids.insert(s.id.clone()) {
                return Err(v("services", format!("duplicate service {}", s.id)));
            }
            if !known(s.host) || self.peers[s.host.0 as usize].nat {
                return Err(v("services", format!("service {} needs a known non-NAT host", s.id)));
            }
            if s.chunks == 0 {
                return Err(v("services", format!("service {} has no chunks", s.id)));
            }
        }
        let mut txns = BTreeSet::new();
        for w in &self.workflows {
            if !txns.insert(w.txn_id) {
                return Err(v("workflows", format!("duplicate workflow {}", w.txn_id)));
            }
            if !known(w.initiator) || self.peers[w.initiator.0 as usize].nat {
                return Err(v(
                    "workflows",
                    format!("workflow {} initiator {} must be a known non-NAT peer", w.txn_id, w.initiator),
                ));
            }
            if let Some(s) = w.steps.iter().find(|s| !ids.contains(&s.service)) {
                return Err(v(
                    "workflows",
                    format!("workflow {} step {} names missing service {}", w.txn_id, s.id, s.service),
                ));
            }
            w.to_workflow(c)
                .validate()
                .map_err(|e| v("workflows", format!("workflow {}: {e}", w.txn_id)))?;
        }
        for f in &self.faults {
            match f {
                FaultEntry::Crash { node, at, recover } => {
                    if !known(*node) || recover.is_some_and(|r| r <= *at) {
                        return Err(v("faults", format!("bad crash of {node} at {at}")));
                    }
                }
                FaultEntry::Partition { groups, at, until } => {
                    if groups.iter().flatten().any(|x| !known(*x)) {
                        return Err(v("faults", "partition names unknown node".into()));
                    }
                    let ps = crate::simnet::Partition::new(groups.clone(), crate::simnet::SimTime(*at), crate::simnet::SimTime(*until));
                    ps.map_err(|e| v("faults", e.to_string()))?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = "[config]\nname=mini\n[peers]\npeer 0\npeer 1\n[services]\nservice pay tags=pay chunks=2\n";

    #[test]
    fn minimal_file_gets_defaults() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(s.peers.len(), 2);
        assert_eq!(s.config.duration, 86_400);
        assert_eq!(s.config.base_latency, 50);
        assert_eq!(s.services[0].host, NodeId(0));
        assert_eq!(Scenario::parse(&s.write()).unwrap(), s);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "[config]\nname=x\nbogus=1\n";
        assert_eq!(
            Scenario::parse(text),
            Err(ScenarioError::Parse {
                line: 3,
                reason: "unknown key \"bogus\"".into()
            })
        );
    }

    #[test]
    fn workflow_with_missing_service_fails_validation() {
        let text = format!("{MINIMAL}[workflows]\nworkflow 1 initiator=0\nstep 0 service=ghost after= effect=bal+=1\n");
        assert!(matches!(Scenario::parse(&text), Err(ScenarioError::Validation { field, .. }) if field == "workflows"));
    }

    #[test]
    fn effect_and_partition_syntax() {
        let text = format!(
            "{MINIMAL}[workflows]\nworkflow 1 initiator=1 start=5 mode=relaxed\nstep 0 service=pay after= effect=bal+=-10\nstep 1 service=pay after=0 effect=stock+=3 fail=1\n[faults]\npartition 0|1 at=10 until=20\ncrash 1 at=3\n"
        );
        let s = Scenario::parse(&text).unwrap();
        let w = &s.workflows[0];
        assert_eq!(w.steps[0].effect, Delta::new("bal", -10));
        assert_eq!(w.steps[1].after, BTreeSet::from([0]));
        assert!(w.steps[1].fail);
        assert_eq!(s.faults.len(), 2);
    }

    fn arb_window() -> impl Strategy<Value = Vec<AvailabilityWindow>> {
        prop_oneof![
            Just(vec![AvailabilityWindow::always()]),
            (0u8..12, 1u8..12).prop_map(|(a, l)| vec![AvailabilityWindow::hours(a, a + l).unwrap()]),
            (13u8..24, 1u8..12).prop_map(|(a, e)| vec![AvailabilityWindow::new(a, e, true).unwrap()]),
        ]
    }

    fn arb_scenario() -> impl Strategy<Value = Scenario> {
        let peers = proptest::collection::vec((arb_window(), any::<bool>(), 1u32..4), 2..6);
        (
            peers,
            any::<u64>(),
            0u64..200_000,
            0.0f64..1.0,
            proptest::collection::vec(-50i64..50, 0..4),
            0usize..3,
        )
            .prop_map(|(peers, seed, duration, r_min, effects, nfaults)| {
                let mut sc = Scenario::default();
                sc.config.seed = seed;
                sc.config.duration = duration;
                sc.config.r_min = r_min;
                sc.config.topology = TopologyKind::Random { q: r_min };
                sc.config.metrics = vec!["coverage".into(), "messages_sent".into()];
                sc.peers = peers
                    .iter()
                    .enumerate()
                    .map(|(i, (w, nat, up))| PeerSpec {
                        id: NodeId(i as u32),
                        windows: w.clone(),
                        capacity: Capacity {
                            upload_slots: *up,
                            ..Capacity::default()
                        },
                        nat: *nat && i > 0,
                    })
                    .collect();
                let n = sc.peers.len() as u32;
                sc.trust = (1..n)
                    .map(|i| TrustSpec {
                        from: NodeId(0),
                        to: NodeId(i),
                        weight: r_min / f64::from(i),
                    })
                    .collect();
                sc.services = vec![ServiceSpec {
                    id: ServiceId::new("svc"),
                    tags: BTreeSet::from(["a".to_string(), "b".to_string()]),
                    chunks: 3,
                    host: NodeId(0),
                    init: BTreeMap::from([("bal".to_string(), 100)]),
                }];
                if !effects.is_empty() {
                    sc.workflows = vec![WorkflowSpec {
                        txn_id: 9,
                        initiator: NodeId(0),
                        start: seed % 1000,
                        mode: if seed % 2 == 0 { TxnMode::Strict } else { TxnMode::Relaxed },
                        timeout: seed % 7,
                        steps: effects
                            .iter()
                            .enumerate()
                            .map(|(i, e)| StepSpec {
                                id: i as u32,
                                service: ServiceId::new("svc"),
                                after: (0..i as u32).collect(),
                                effect: Delta::new("bal", *e),
                                fail: *e == 0,
                            })
                            .collect(),
                    }];
                }
                sc.faults = (0..nfaults as u32)
                    .map(|i| {
                        if i == 0 {
                            FaultEntry::Crash {
                                node: NodeId(1),
                                at: 10,
                                recover: Some(20 + seed % 5),
                            }
                        } else {
                            FaultEntry::Partition {
                                groups: vec![BTreeSet::from([NodeId(0)]), (1..n).map(NodeId).collect()],
                                at: 5,
                                until: 50,
                            }
                        }
                    })
                    .collect();
                sc
            })
    }

    proptest! {
        #[test]
        fn write_then_parse_round_trips(sc in arb_scenario()) {
            let text = sc.write();
            prop_assert_eq!(Scenario::parse(&text).unwrap(), sc);
        }
    }
}
