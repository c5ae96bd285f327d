//! Fault-injection runs of a single workflow, including exhaustive
//! enumeration of crash and isolation faults at protocol phase boundaries.

use std::collections::{BTreeMap, BTreeSet};

use super::{drive, AuditReport, Delta, Step, TxnConfig, TxnEngine, TxnMode, TxnMsg, Verdict, Workflow};
use crate::services::ServiceId;
use crate::simnet::{Fault, LinkModel, NodeId, Partition, Sim, SimTime, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Step `i` depends on step `i - 1`.
    Chain,
    /// Every step depends on step 0.
    Fan,
}

/// One initiator on node 0 and one service per step; service `s{i}` runs on
/// node `i + 1` and holds `bal = initial`.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub steps: usize,
    pub mode: TxnMode,
    pub shape: Shape,
    pub initial: i64,
    pub amount: i64,
    pub failing: Option<u32>,
    pub link: LinkModel,
    pub timeout: u64,
}

impl Fixture {
    pub fn chain(steps: usize, mode: TxnMode) -> Self {
        let link = LinkModel::default();
        Self {
            steps,
            mode,
            shape: Shape::Chain,
            initial: 100,
            amount: 10,
            failing: None,
            link,
            timeout: super::default_timeout(link.base_latency, steps),
        }
    }

    pub fn service(i: usize) -> ServiceId {
        ServiceId::new(format!("s{i}"))
    }

    pub fn workflow(&self) -> Workflow {
        let steps = (0..self.steps)
            .map(|i| {
                let mut s = Step::new(i as u32, Self::service(i), Delta::new("bal", self.amount));
                if i > 0 {
                    s = match self.shape {
                        Shape::Chain => s.after([i as u32 - 1]),
                        Shape::Fan => s.after([0]),
                    };
                }
                if self.failing == Some(i as u32) {
                    s = s.failing();
                }
                s
            })
            .collect();
        Workflow {
            txn_id: 1,
            steps,
            mode: self.mode,
            initiator: NodeId(0),
            timeout: self.timeout,
        }
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        (0..=self.steps as u32).map(NodeId).collect()
    }

    /// Time after which every run is expected to have settled.
    pub fn horizon(&self) -> u64 {
        8 * self.timeout + 40 * self.link.max_delay() + 10_000
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FaultKind {
    /// Crash, then recover after `duration`.
    Crash,
    /// Partition the node away from everyone for `duration`.
    Isolate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub node: NodeId,
    pub at: u64,
    pub duration: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Trace,
    pub audit: AuditReport,
    pub quiescent: bool,
    pub verdict: Option<Verdict>,
    pub engine: TxnEngine,
}

pub fn run(fixture: &Fixture, faults: &[FaultSpec], seed: u64) -> RunResult {
    let mut sim: Sim<TxnMsg> = Sim::new(fixture.link, seed).expect("valid link model");
    for _ in fixture.nodes() {
        sim.add_node(false);
    }
    let mut engine = TxnEngine::new(TxnConfig::for_link(fixture.link.max_delay()));
    for i in 0..fixture.steps {
        let initial = BTreeMap::from([("bal".to_string(), fixture.initial)]);
        engine.add_service(Fixture::service(i), NodeId(i as u32 + 1), initial);
    }
    let nodes = fixture.nodes();
    for f in faults {
        let (start, end) = (SimTime(f.at), SimTime(f.at + f.duration));
        match f.kind {
            FaultKind::Crash => {
                sim.schedule_fault(start, Fault::Crash(f.node)).expect("known node");
                sim.schedule_fault(end, Fault::Recover(f.node)).expect("known node");
            }
            FaultKind::Isolate => {
                let rest: BTreeSet<NodeId> = nodes.iter().copied().filter(|n| *n != f.node).collect();
                let p = Partition::new(vec![BTreeSet::from([f.node]), rest], start, end).expect("disjoint groups");
                sim.schedule_fault(start, Fault::Partition(p)).expect("known nodes");
            }
        }
    }
    let wf = fixture.workflow();
    let txn = wf.txn_id;
    engine.begin(&mut sim, wf).expect("fixture workflow is valid");
    drive(&mut sim, &mut engine, SimTime(fixture.horizon()));
    RunResult {
        audit: engine.audit(),
        quiescent: engine.is_quiescent(),
        verdict: engine.verdict(txn),
        trace: sim.into_trace(),
        engine,
    }
}

const PROTOCOL_TAGS: [&str; 8] = ["BEGIN", "EXEC", "PREP", "DLOG", "DECIDE", "COMMIT", "COMP", "ABORT"];

/// Ticks at which the fault-free, jitter-free run changes protocol phase,
/// each paired with the following tick.
pub fn phase_boundaries(fixture: &Fixture) -> Vec<u64> {
    let mut f = fixture.clone();
    f.link.jitter_max = 0;
    let r = run(&f, &[], 0);
    let mut ticks = BTreeSet::new();
    for e in r.trace.entries() {
        if PROTOCOL_TAGS.contains(&e.event.as_str()) {
            ticks.insert(e.tick.ticks());
            ticks.insert(e.tick.ticks() + 1);
        }
    }
    ticks.into_iter().collect()
}

/// All single faults at phase boundaries, on every node, of both kinds, with
/// a short (one link latency) and a long (twice the timeout) duration.
pub fn single_faults(fixture: &Fixture) -> Vec<FaultSpec> {
    let durations = [fixture.link.base_latency.max(1), 2 * fixture.timeout];
    let mut out = Vec::new();
    for at in phase_boundaries(fixture) {
        for node in fixture.nodes() {
            for kind in [FaultKind::Crash, FaultKind::Isolate] {
                for duration in durations {
                    out.push(FaultSpec { kind, node, at, duration });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct LabSummary {
    pub runs: usize,
    pub committed: usize,
    pub aborted: usize,
    pub non_quiescent: usize,
    pub violations: Vec<(Vec<FaultSpec>, String)>,
}

/// Runs every combination of up to `max_faults` faults (1 or 2) drawn from
/// [`single_faults`], plus the fault-free run.
pub fn explore(fixture: &Fixture, max_faults: usize, seed: u64) -> LabSummary {
    let singles = single_faults(fixture);
    let mut plans: Vec<Vec<FaultSpec>> = vec![Vec::new()];
    plans.extend(singles.iter().map(|f| vec![*f]));
    if max_faults >= 2 {
        for (i, a) in singles.iter().enumerate() {
            for b in &singles[i + 1..] {
                plans.push(vec![*a, *b]);
            }
        }
    }
    let mut summary = LabSummary::default();
    for plan in plans {
        let r = run(fixture, &plan, seed);
        summary.runs += 1;
        match r.verdict {
            Some(Verdict::Committed) => summary.committed += 1,
            Some(Verdict::Aborted) => summary.aborted += 1,
            None => {}
        }
        if !r.quiescent {
            summary.non_quiescent += 1;
        }
        for v in r.audit.atomicity_violations.iter().chain(&r.audit.consistency_violations) {
            summary.violations.push((plan.clone(), v.clone()));
        }
    }
    summary
}

/// `count` faults with uniformly drawn kind, node, start and duration. Starts
/// fall before the fault-free run would have settled plus one timeout.
pub fn random_faults(fixture: &Fixture, count: usize, seed: u64) -> Vec<FaultSpec> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let latest = phase_boundaries(fixture).last().copied().unwrap_or(0) + fixture.timeout;
    let nodes = fixture.nodes();
    (0..count)
        .map(|_| FaultSpec {
            kind: if rng.gen_bool(0.5) { FaultKind::Crash } else { FaultKind::Isolate },
            node: nodes[rng.gen_range(0..nodes.len())],
            at: rng.gen_range(0..=latest),
            duration: rng.gen_range(1..=2 * fixture.timeout),
        })
        .collect()
}
