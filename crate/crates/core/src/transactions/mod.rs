//! Distributed workflow transactions with one local coordinator per service.
//!
//! Two completion modes are provided:
//!
//! * **Strict**: steps execute under per-key no-wait locks, then a
//!   decentralised two-phase completion runs. Once every participant has
//!   prepared, the initiator replicates a commit decision record into every
//!   participant's durable log and only after all of them acknowledged does
//!   it send `Commit`. A participant that holds the decision record never
//!   aborts on its own; it resolves by asking the other participants. A
//!   prepared participant without the record aborts after a bounded wait
//!   (presumed abort), which is safe because the commit verdict requires
//!   its own acknowledgement.
//! * **Relaxed**: steps commit locally as they execute; any failure makes the
//!   initiator issue compensations for everything that ran (saga style).
//!
//! Effects are integer deltas on a per-service key/value state; compensation
//! is the exact inverse delta. Service state and coordinator logs are
//! durable, locks and in-flight bookkeeping are volatile and rebuilt from the
//! log after a crash.

pub mod testbed;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::services::ServiceId;
use crate::simnet::{NodeId, Sim, SimTime, Trace};

pub type TxnId = u64;
pub type StepId = u32;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TxnError {
    #[error("workflow names unpublished service {0}")]
    UnknownService(ServiceId),
    #[error("invalid workflow: {0}")]
    InvalidWorkflow(String),
    #[error("transaction {0} has conflicting verdicts")]
    ConflictingVerdicts(TxnId),
    #[error("initiator {0} is offline")]
    InitiatorOffline(NodeId),
    #[error("duplicate transaction id {0}")]
    DuplicateTxn(TxnId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxnMode {
    Strict,
    Relaxed,
}

impl TxnMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TxnMode::Strict => "strict",
            TxnMode::Relaxed => "relaxed",
        }
    }
}

/// `key += amount` on the service's state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Delta {
    pub key: String,
    pub amount: i64,
}

impl Delta {
    pub fn new(key: impl Into<String>, amount: i64) -> Self {
        Self { key: key.into(), amount }
    }

    pub fn inverse(&self) -> Delta {
        Delta {
            key: self.key.clone(),
            amount: -self.amount,
        }
    }
}

impl fmt::Display for Delta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+={}", self.key, self.amount)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub step_id: StepId,
    pub service: ServiceId,
    pub depends_on: BTreeSet<StepId>,
    pub effect: Delta,
    /// Test fixture: the service refuses this step's effect.
    pub fail: bool,
}

impl Step {
    pub fn new(step_id: StepId, service: ServiceId, effect: Delta) -> Self {
        Self {
            step_id,
            service,
            depends_on: BTreeSet::new(),
            effect,
            fail: false,
        }
    }

    pub fn after(mut self, deps: impl IntoIterator<Item = StepId>) -> Self {
        self.depends_on.extend(deps);
        self
    }

    pub fn failing(mut self) -> Self {
        self.fail = true;
        self
    }

    pub fn compensation(&self) -> Delta {
        self.effect.inverse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workflow {
    pub txn_id: TxnId,
    pub steps: Vec<Step>,
    pub mode: TxnMode,
    pub initiator: NodeId,
    pub timeout: u64,
}

/// `10 · base_latency · steps`.
pub fn default_timeout(base_latency: u64, steps: usize) -> u64 {
    10 * base_latency * steps.max(1) as u64
}

impl Workflow {
    pub fn step(&self, id: StepId) -> Option<&Step> {
        self.steps.iter().find(|s| s.step_id == id)
    }

    pub fn step_ids(&self) -> impl Iterator<Item = StepId> + '_ {
        self.steps.iter().map(|s| s.step_id)
    }

    /// Kahn order with ascending step id as tiebreak. Fails on unknown
    /// dependencies, duplicate ids or cycles.
    pub fn topological_order(&self) -> Result<Vec<StepId>, TxnError> {
        let ids: BTreeSet<StepId> = self.step_ids().collect();
        if ids.len() != self.steps.len() {
            return Err(TxnError::InvalidWorkflow("duplicate step id".into()));
        }
        for s in &self.steps {
            if let Some(d) = s.depends_on.iter().find(|d| !ids.contains(d)) {
                return Err(TxnError::InvalidWorkflow(format!("step {} depends on unknown step {d}", s.step_id)));
            }
        }
        let mut done = BTreeSet::new();
        let mut order = Vec::with_capacity(ids.len());
        while order.len() < ids.len() {
            let next = self
                .steps
                .iter()
                .filter(|s| !done.contains(&s.step_id) && s.depends_on.is_subset(&done))
                .map(|s| s.step_id)
                .min()
                .ok_or_else(|| TxnError::InvalidWorkflow("dependency cycle".into()))?;
            done.insert(next);
            order.push(next);
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<(), TxnError> {
        self.topological_order().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Executed,
    Prepared,
    Committed,
    Aborted,
    Compensated,
}

impl Phase {
    pub fn is_final(self) -> bool {
        matches!(self, Phase::Committed | Phase::Aborted | Phase::Compensated)
    }

    pub fn is_undone(self) -> bool {
        matches!(self, Phase::Aborted | Phase::Compensated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Committed,
    Aborted,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Committed => "commit",
            Verdict::Aborted => "abort",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Participant {
    pub step: StepId,
    pub service: ServiceId,
    pub host: NodeId,
}

/// Durable per-step record; the coordinator log is a sequence of snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub txn: TxnId,
    pub step: StepId,
    pub phase: Phase,
    /// The commit decision record has been logged here.
    pub decided: bool,
    pub delta: Delta,
    pub mode: TxnMode,
    pub initiator: NodeId,
    pub timeout: u64,
    pub deadline: SimTime,
    pub participants: Arc<Vec<Participant>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckKind {
    Executed,
    ExecFailed,
    Prepared,
    Refused,
    DecideAck,
    DecideNack,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TxnMsg {
    Exec {
        txn: TxnId,
        step: StepId,
        service: ServiceId,
        delta: Delta,
        mode: TxnMode,
        fail: bool,
        initiator: NodeId,
        timeout: u64,
    },
    Prepare {
        txn: TxnId,
        step: StepId,
        service: ServiceId,
        participants: Arc<Vec<Participant>>,
    },
    Decide {
        txn: TxnId,
        step: StepId,
        service: ServiceId,
        participants: Arc<Vec<Participant>>,
    },
    Commit {
        txn: TxnId,
        step: StepId,
        service: ServiceId,
    },
    Abort {
        txn: TxnId,
        step: StepId,
        service: ServiceId,
    },
    Ack {
        txn: TxnId,
        step: StepId,
        kind: AckKind,
    },
    Query {
        txn: TxnId,
        about: StepId,
        service: ServiceId,
        asker: Participant,
    },
    Status {
        txn: TxnId,
        to: Participant,
        from_step: StepId,
        phase: Option<Phase>,
        decided: bool,
    },
    InitTimer {
        txn: TxnId,
    },
    StepTimer {
        txn: TxnId,
        step: StepId,
        service: ServiceId,
        attempt: u32,
    },
}

pub const MSG_KIND: &str = "txn";

/// One service's coordinator, co-located on the service's host node.
#[derive(Debug, Clone)]
pub struct LocalCoordinator {
    pub service: ServiceId,
    pub host: NodeId,
    log: Vec<StepRecord>,
    state: BTreeMap<String, i64>,
    records: BTreeMap<(TxnId, StepId), StepRecord>,
    locks: BTreeMap<String, TxnId>,
    peer_status: BTreeMap<(TxnId, StepId), BTreeMap<StepId, (Phase, bool)>>,
}

impl LocalCoordinator {
    pub fn new(service: ServiceId, host: NodeId, initial: BTreeMap<String, i64>) -> Self {
        Self {
            service,
            host,
            log: Vec::new(),
            state: initial,
            records: BTreeMap::new(),
            locks: BTreeMap::new(),
            peer_status: BTreeMap::new(),
        }
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn state(&self) -> &BTreeMap<String, i64> {
        &self.state
    }

    pub fn locks(&self) -> &BTreeMap<String, TxnId> {
        &self.locks
    }

    /// Latest logged phase, read from the durable log.
    pub fn phase_of(&self, txn: TxnId, step: StepId) -> Option<Phase> {
        self.log.iter().rev().find(|r| r.txn == txn && r.step == step).map(|r| r.phase)
    }

    /// Last durable snapshot per step.
    pub fn latest_records(&self) -> BTreeMap<(TxnId, StepId), &StepRecord> {
        let mut out = BTreeMap::new();
        for r in &self.log {
            out.insert((r.txn, r.step), r);
        }
        out
    }

    fn append(&mut self, rec: StepRecord) {
        self.log.push(rec.clone());
        self.records.insert((rec.txn, rec.step), rec);
    }

    fn crash(&mut self) {
        self.records.clear();
        self.locks.clear();
        self.peer_status.clear();
    }

    fn recover(&mut self) -> Vec<StepRecord> {
        self.records = self.latest_records().into_iter().map(|(k, r)| (k, r.clone())).collect();
        self.locks.clear();
        let mut pending = Vec::new();
        for r in self.records.values() {
            if r.phase.is_final() {
                continue;
            }
            if r.mode == TxnMode::Strict {
                self.locks.insert(r.delta.key.clone(), r.txn);
            }
            pending.push(r.clone());
        }
        pending
    }

    fn value(&self, key: &str) -> i64 {
        self.state.get(key).copied().unwrap_or(0)
    }

    fn apply(&mut self, d: &Delta) {
        *self.state.entry(d.key.clone()).or_insert(0) += d.amount;
    }

    fn release(&mut self, key: &str, txn: TxnId) {
        if self.locks.get(key) == Some(&txn) {
            self.locks.remove(key);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitDurable {
    Begun,
    Deciding,
    Verdict(Verdict),
    Done(Verdict),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitPhase {
    Executing,
    Preparing,
    Deciding,
    Committing,
    Aborting,
}

#[derive(Debug, Clone)]
struct InitVolatile {
    phase: InitPhase,
    done: BTreeSet<StepId>,
    dispatched: BTreeSet<StepId>,
    acks: BTreeSet<StepId>,
}

#[derive(Debug, Clone)]
struct InitiatorState {
    workflow: Arc<Workflow>,
    participants: Arc<Vec<Participant>>,
    begun_at: SimTime,
    durable: InitDurable,
    vol: Option<InitVolatile>,
}

impl InitiatorState {
    fn participant(&self, step: StepId) -> &Participant {
        self.participants.iter().find(|p| p.step == step).expect("participant for step")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxnConfig {
    /// Retransmission period for initiator messages.
    pub retry_period: u64,
    /// How long a prepared participant waits for query answers.
    pub query_wait: u64,
}

impl TxnConfig {
    pub fn for_link(max_delay: u64) -> Self {
        Self {
            retry_period: 2 * max_delay + 1,
            query_wait: 2 * max_delay + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxnStatus {
    Committed,
    Aborted,
    Pending,
}

/// Result of [`TxnEngine::audit`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub committed: Vec<TxnId>,
    pub aborted: Vec<TxnId>,
    pub pending: Vec<TxnId>,
    pub atomicity_violations: Vec<String>,
    pub consistency_violations: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.atomicity_violations.is_empty() && self.consistency_violations.is_empty()
    }
}

fn send<P: Clone + fmt::Debug + From<TxnMsg>>(sim: &mut Sim<P>, src: NodeId, dst: NodeId, msg: TxnMsg) {
    let _ = sim.send(src, dst, MSG_KIND, P::from(msg));
}

fn timer<P: Clone + fmt::Debug + From<TxnMsg>>(sim: &mut Sim<P>, node: NodeId, delay: u64, msg: TxnMsg) {
    let _ = sim.set_timer(node, delay.max(1), P::from(msg));
}

/// All coordinators and initiators of one simulation.
#[derive(Debug, Clone)]
pub struct TxnEngine {
    coordinators: BTreeMap<ServiceId, LocalCoordinator>,
    initial: BTreeMap<ServiceId, BTreeMap<String, i64>>,
    initiators: BTreeMap<TxnId, InitiatorState>,
    pub config: TxnConfig,
    protocol_violations: Vec<String>,
}

impl TxnEngine {
    pub fn new(config: TxnConfig) -> Self {
        Self {
            coordinators: BTreeMap::new(),
            initial: BTreeMap::new(),
            initiators: BTreeMap::new(),
            config,
            protocol_violations: Vec::new(),
        }
    }

    pub fn add_service(&mut self, service: ServiceId, host: NodeId, initial: BTreeMap<String, i64>) {
        self.initial.insert(service.clone(), initial.clone());
        self.coordinators.insert(service.clone(), LocalCoordinator::new(service, host, initial));
    }

    /// Moves a coordinator to a new host, keeping its log and state.
    pub fn rehost(&mut self, service: &ServiceId, host: NodeId) {
        if let Some(c) = self.coordinators.get_mut(service) {
            c.host = host;
        }
    }

    pub fn coordinator(&self, service: &ServiceId) -> Option<&LocalCoordinator> {
        self.coordinators.get(service)
    }

    pub fn coordinators(&self) -> impl Iterator<Item = &LocalCoordinator> {
        self.coordinators.values()
    }

    pub fn has_service(&self, service: &ServiceId) -> bool {
        self.coordinators.contains_key(service)
    }

    pub fn txn_ids(&self) -> impl Iterator<Item = TxnId> + '_ {
        self.initiators.keys().copied()
    }

    pub fn workflow(&self, txn: TxnId) -> Option<&Workflow> {
        self.initiators.get(&txn).map(|i| i.workflow.as_ref())
    }

    pub fn protocol_violations(&self) -> &[String] {
        &self.protocol_violations
    }

    /// Final verdict as known by the initiator's durable log.
    pub fn verdict(&self, txn: TxnId) -> Option<Verdict> {
        match self.initiators.get(&txn)?.durable {
            InitDurable::Verdict(v) | InitDurable::Done(v) => Some(v),
            _ => None,
        }
    }

    pub fn begin<P: Clone + fmt::Debug + From<TxnMsg>>(&mut self, sim: &mut Sim<P>, workflow: Workflow) -> Result<(), TxnError> {
        workflow.validate()?;
        if self.initiators.contains_key(&workflow.txn_id) {
            return Err(TxnError::DuplicateTxn(workflow.txn_id));
        }
        let mut participants = Vec::with_capacity(workflow.steps.len());
        for s in &workflow.steps {
            let c = self
                .coordinators
                .get(&s.service)
                .ok_or_else(|| TxnError::UnknownService(s.service.clone()))?;
            participants.push(Participant {
                step: s.step_id,
                service: s.service.clone(),
                host: c.host,
            });
        }
        if !sim.is_online(workflow.initiator) {
            return Err(TxnError::InitiatorOffline(workflow.initiator));
        }
        let txn = workflow.txn_id;
        let init = workflow.initiator;
        sim.record(
            Some(init),
            "BEGIN",
            format!(
                "txn={txn} mode={} steps={} timeout={}",
                workflow.mode.as_str(),
                workflow.steps.len(),
                workflow.timeout
            ),
        );
        let empty = workflow.steps.is_empty();
        self.initiators.insert(
            txn,
            InitiatorState {
                workflow: Arc::new(workflow),
                participants: Arc::new(participants),
                begun_at: sim.now(),
                durable: InitDurable::Begun,
                vol: Some(InitVolatile {
                    phase: InitPhase::Executing,
                    done: BTreeSet::new(),
                    dispatched: BTreeSet::new(),
                    acks: BTreeSet::new(),
                }),
            },
        );
        if empty {
            self.set_verdict(sim, txn, Verdict::Committed);
            self.finish(txn);
            return Ok(());
        }
        self.dispatch_ready(sim, txn);
        timer(sim, init, self.config.retry_period, TxnMsg::InitTimer { txn });
        Ok(())
    }

    fn set_verdict<P: Clone + fmt::Debug + From<TxnMsg>>(&mut self, sim: &mut Sim<P>, txn: TxnId, v: Verdict) {
        let st = self.initiators.get_mut(&txn).expect("initiator");
        if matches!(st.durable, InitDurable::Verdict(_) | InitDurable::Done(_)) {
            return;
        }
        st.durable = InitDurable::Verdict(v);
        let init = st.workflow.initiator;
        sim.record(Some(init), "DECIDE", format!("txn={txn} verdict={}", v.as_str()));
    }

    fn finish(&mut self, txn: TxnId) {
        let st = self.initiators.get_mut(&txn).expect("initiator");
        if let InitDurable::Verdict(v) = st.durable {
            st.durable = InitDurable::Done(v);
        }
        st.vol = None;
    }

    fn dispatch_ready<P: Clone + fmt::Debug + From<TxnMsg>>(&mut self, sim: &mut Sim<P>, txn: TxnId) {
        let st = self.initiators.get_mut(&txn).expect("initiator");
        let Some(vol) = st.vol.as_mut() else { return };
        let ready: Vec<StepId> = st
            .workflow
            .steps
            .iter()
            .filter(|s| !vol.dispatched.contains(&s.step_id) && s.depends_on.is_subset(&vol.done))
            .map(|s| s.step_id)
            .collect();
        vol.dispatched.extend(ready.iter().copied());
        for step in ready {
            self.send_exec(sim, txn, step);
        }
    }

    fn send_exec<P: Clone + fmt::Debug + From<TxnMsg>>(&self, sim: &mut Sim<P>, txn: TxnId, step: StepId) {
        let st = &self.initiators[&txn];
        let wf = &st.workflow;
        let s = wf.step(step).expect("step");
        let p = st.participant(step);
        let msg = TxnMsg::Exec {
            txn,
            step,
            service: s.service.clone(),
            delta: s.effect.clone(),
            mode: wf.mode,
            fail: s.fail,
            initiator: wf.initiator,
            timeout: wf.timeout,
        };
        send(sim, wf.initiator, p.host, msg);
    }

    /// Sends the current phase's message to every participant not yet acked.
    fn broadcast<P: Clone + fmt::Debug + From<TxnMsg>>(&self, sim: &mut Sim<P>, txn: TxnId) {
        let st = &self.initiators[&txn];
        let Some(vol) = &st.vol else { return };
        let init = st.workflow.initiator;
        for p in st.participants.iter() {
            let (txn, step, service) = (txn, p.step, p.service.clone());
            let msg = match vol.phase {
                InitPhase::Executing => {
                    if vol.dispatched.contains(&step) && !vol.done.contains(&step) {
                        self.send_exec(sim, txn, step);
                    }
                    continue;
                }
                _ if vol.acks.contains(&step) => continue,
                InitPhase::Preparing => TxnMsg::Prepare {
                    txn,
                    step,
                    service,
                    participants: st.participants.clone(),
                },
                InitPhase::Deciding => TxnMsg::Decide {
                    txn,
                    step,
                    service,
                    participants: st.participants.clone(),
                },
                InitPhase::Committing => TxnMsg::Commit { txn, step, service },
                InitPhase::Aborting => TxnMsg::Abort { txn, step, service },
            };
            send(sim, init, p.host, msg);
        }
    }

    fn enter<P: Clone + fmt::Debug + From<TxnMsg>>(&mut self, sim: &mut Sim<P>, txn: TxnId, phase: InitPhase) {
        let st = self.initiators.get_mut(&txn).expect("initiator");
        if let Some(vol) = st.vol.as_mut() {
            vol.phase = phase;
            vol.acks.clear();
        }
        self.broadcast(sim, txn);
    }

    fn start_abort<P: Clone + fmt::Debug + From<TxnMsg>>(&mut self, sim: &mut Sim<P>, txn: TxnId) {
        if matches!(
            self.initiators[&txn].durable,
            InitDurable::Verdict(Verdict::Committed) | InitDurable::Done(_)
        ) {
            return;
        }
        self.set_verdict(sim, txn, Verdict::Aborted);
        self.enter(sim, txn, InitPhase::Aborting);
    }

    fn on_ack<P: Clone + fmt::Debug + From<TxnMsg>>(&mut self, sim: &mut Sim<P>, txn: TxnId, step: StepId, kind: AckKind) {
        let Some(st) = self.initiators.get_mut(&txn) else { return };
        let mode = st.workflow.mode;
        let total = st.participants.len();
        let Some(vol) = st.vol.as_mut() else { return };
        match (vol.phase, kind) {
            (InitPhase::Executing, AckKind::Executed) => {
                vol.done.insert(step);
                if vol.done.len() == total {
                    match mode {
                        TxnMode::Strict => self.enter(sim, txn, InitPhase::Preparing),
                        TxnMode::Relaxed => {
                            self.set_verdict(sim, txn, Verdict::Committed);
                            self.finish(txn);
                        }
                    }
                } else {
                    self.dispatch_ready(sim, txn);
                }
            }
            (InitPhase::Executing, AckKind::ExecFailed) | (InitPhase::Preparing, AckKind::Refused) => self.start_abort(sim, txn),
            (InitPhase::Preparing, AckKind::Prepared) => {
                vol.acks.insert(step);
                if vol.acks.len() == total {
                    st.durable = InitDurable::Deciding;
                    self.enter(sim, txn, InitPhase::Deciding);
                }
            }
            (InitPhase::Deciding, AckKind::DecideAck) => {
                vol.acks.insert(step);
                if vol.acks.len() == total {
                    self.set_verdict(sim, txn, Verdict::Committed);
                    self.enter(sim, txn, InitPhase::Committing);
                }
            }
            (InitPhase::Deciding, AckKind::DecideNack) => self.start_abort(sim, txn),
            (InitPhase::Committing, AckKind::Committed) | (InitPhase::Aborting, AckKind::Aborted) => {
                vol.acks.insert(step);
                if vol.acks.len() == total {
                    self.finish(txn);
                }
            }
            _ => {}
        }
    }

    fn on_init_timer<P: Clone + fmt::Debug + From<TxnMsg>>(&mut self, sim: &mut Sim<P>, txn: TxnId) {
        let Some(st) = self.initiators.get(&txn) else { return };
        let Some(vol) = &st.vol else { return };
        let expired = sim.now().since(st.begun_at) >= st.workflow.timeout;
        let init = st.workflow.initiator;
        if matches!(vol.phase, InitPhase::Executing | InitPhase::Preparing) && expired {
            sim.record(Some(init), "TIMEOUT", format!("txn={txn}"));
            self.start_abort(sim, txn);
        } else {
            self.broadcast(sim, txn);
        }
        if self.initiators[&txn].vol.is_some() {
            timer(sim, init, self.config.retry_period, TxnMsg::InitTimer { txn });
        }
    }

    /// Dispatches a transaction message or timer delivered to `node`.
    pub fn on_message<P: Clone + fmt::Debug + From<TxnMsg>>(&mut self, sim: &mut Sim<P>, node: NodeId, msg: TxnMsg) {
        match msg {
            TxnMsg::Ack { txn, step, kind } => {
                if self.initiators.get(&txn).is_some_and(|s| s.workflow.initiator == node) {
                    self.on_ack(sim, txn, step, kind);
                }
            }
            TxnMsg::InitTimer { txn } => {
                if self.initiators.get(&txn).is_some_and(|s| s.workflow.initiator == node) {
                    self.on_init_timer(sim, txn);
                }
            }
            TxnMsg::Exec {
                txn,
                step,
                service,
                delta,
                mode,
                fail,
                initiator,
                timeout,
            } => self.on_exec(sim, node, &service, txn, step, delta, mode, fail, initiator, timeout),
            TxnMsg::Prepare {
                txn,
                step,
                service,
                participants,
            } => self.on_prepare(sim, node, &service, txn, step, participants),
            TxnMsg::Decide {
                txn,
                step,
                service,
                participants,
            } => self.on_decide(sim, node, &service, txn, step, participants),
            TxnMsg::Commit { txn, step, service } => self.on_commit(sim, node, &service, txn, step),
            TxnMsg::Abort { txn, step, service } => self.on_abort(sim, node, &service, txn, step),
            TxnMsg::Query { txn, about, service, asker } => {
                let Some(c) = self.coordinators.get(&service).filter(|c| c.host == node) else {
                    return;
                };
                let rec = c.records.get(&(txn, about));
                let msg = TxnMsg::Status {
                    txn,
                    to: asker.clone(),
                    from_step: about,
                    phase: rec.map(|r| r.phase),
                    decided: rec.is_some_and(|r| r.decided),
                };
                send(sim, node, asker.host, msg);
            }
            TxnMsg::Status {
                txn,
                to,
                from_step,
                phase,
                decided,
            } => self.on_status(sim, node, &to, txn, from_step, phase, decided),
            TxnMsg::StepTimer { txn, step, service, attempt } => self.on_step_timer(sim, node, &service, txn, step, attempt),
        }
    }

    fn coord_at(&mut self, service: &ServiceId, node: NodeId) -> Option<&mut LocalCoordinator> {
        self.coordinators.get_mut(service).filter(|c| c.host == node)
    }

    fn ack<P: Clone + fmt::Debug + From<TxnMsg>>(sim: &mut Sim<P>, from: NodeId, to: NodeId, txn: TxnId, step: StepId, kind: AckKind) {
        send(sim, from, to, TxnMsg::Ack { txn, step, kind });
    }

    #[allow(clippy::too_many_arguments)]
    fn tombstone<P: Clone + fmt::Debug + From<TxnMsg>>(
        sim: &mut Sim<P>,
        c: &mut LocalCoordinator,
        txn: TxnId,
        step: StepId,
        delta: Delta,
        mode: TxnMode,
        initiator: NodeId,
        reason: &str,
    ) {
        c.append(StepRecord {
            txn,
            step,
            phase: Phase::Aborted,
            decided: false,
            delta,
            mode,
            initiator,
            timeout: 0,
            deadline: sim.now(),
            participants: Arc::new(Vec::new()),
        });
        sim.record(
            Some(c.host),
            "ABORT",
            format!("txn={txn} step={step} service={} reason={reason}", c.service),
        );
    }

    #[allow(clippy::too_many_arguments)]
    fn on_exec<P: Clone + fmt::Debug + From<TxnMsg>>(
        &mut self,
        sim: &mut Sim<P>,
        node: NodeId,
        service: &ServiceId,
        txn: TxnId,
        step: StepId,
        delta: Delta,
        mode: TxnMode,
        fail: bool,
        initiator: NodeId,
        timeout: u64,
    ) {
        let Some(c) = self.coord_at(service, node) else { return };
        if let Some(rec) = c.records.get(&(txn, step)) {
            let kind = if rec.phase.is_undone() { AckKind::ExecFailed } else { AckKind::Executed };
            Self::ack(sim, node, initiator, txn, step, kind);
            return;
        }
        let conflict = c.locks.get(&delta.key).is_some_and(|t| *t != txn);
        let negative = c.value(&delta.key) + delta.amount < 0;
        if fail || conflict || negative {
            let reason = if fail {
                "effect-failed"
            } else if conflict {
                "lock-conflict"
            } else {
                "integrity"
            };
            Self::tombstone(sim, c, txn, step, delta, mode, initiator, reason);
            Self::ack(sim, node, initiator, txn, step, AckKind::ExecFailed);
            return;
        }
        c.apply(&delta);
        let mut rec = StepRecord {
            txn,
            step,
            phase: Phase::Executed,
            decided: false,
            delta: delta.clone(),
            mode,
            initiator,
            timeout,
            deadline: sim.now().plus(timeout),
            participants: Arc::new(Vec::new()),
        };
        c.append(rec.clone());
        sim.record(Some(node), "EXEC", format!("txn={txn} step={step} service={service} effect={delta}"));
        match mode {
            TxnMode::Strict => {
                c.locks.insert(delta.key.clone(), txn);
                let msg = TxnMsg::StepTimer {
                    txn,
                    step,
                    service: service.clone(),
                    attempt: 0,
                };
                timer(sim, node, timeout, msg);
            }
            TxnMode::Relaxed => {
                rec.phase = Phase::Committed;
                c.append(rec);
                sim.record(Some(node), "COMMIT", format!("txn={txn} step={step} service={service}"));
            }
        }
        Self::ack(sim, node, initiator, txn, step, AckKind::Executed);
    }

    fn on_prepare<P: Clone + fmt::Debug + From<TxnMsg>>(
        &mut self,
        sim: &mut Sim<P>,
        node: NodeId,
        service: &ServiceId,
        txn: TxnId,
        step: StepId,
        participants: Arc<Vec<Participant>>,
    ) {
        let Some(initiator) = self.initiators.get(&txn).map(|s| s.workflow.initiator) else {
            return;
        };
        let Some(c) = self.coord_at(service, node) else { return };
        let kind = match c.records.get(&(txn, step)).cloned() {
            None => {
                let delta = Delta::new("", 0);
                Self::tombstone(sim, c, txn, step, delta, TxnMode::Strict, initiator, "prepare-unknown");
                AckKind::Refused
            }
            Some(mut rec) => match rec.phase {
                Phase::Executed => {
                    rec.phase = Phase::Prepared;
                    rec.participants = participants;
                    rec.deadline = sim.now().plus(rec.timeout);
                    c.append(rec.clone());
                    sim.record(Some(node), "PREP", format!("txn={txn} step={step} service={service}"));
                    let msg = TxnMsg::StepTimer {
                        txn,
                        step,
                        service: service.clone(),
                        attempt: 0,
                    };
                    timer(sim, node, rec.timeout, msg);
                    AckKind::Prepared
                }
                Phase::Prepared | Phase::Committed => AckKind::Prepared,
                Phase::Aborted | Phase::Compensated => AckKind::Refused,
            },
        };
        Self::ack(sim, node, initiator, txn, step, kind);
    }

    fn on_decide<P: Clone + fmt::Debug + From<TxnMsg>>(
        &mut self,
        sim: &mut Sim<P>,
        node: NodeId,
        service: &ServiceId,
        txn: TxnId,
        step: StepId,
        participants: Arc<Vec<Participant>>,
    ) {
        let Some(initiator) = self.initiators.get(&txn).map(|s| s.workflow.initiator) else {
            return;
        };
        let query_wait = self.config.query_wait;
        let Some(c) = self.coord_at(service, node) else { return };
        let kind = match c.records.get(&(txn, step)).cloned() {
            None => {
                Self::tombstone(sim, c, txn, step, Delta::new("", 0), TxnMode::Strict, initiator, "decide-unknown");
                AckKind::DecideNack
            }
            Some(mut rec) => match rec.phase {
                Phase::Prepared if !rec.decided => {
                    rec.decided = true;
                    rec.participants = participants;
                    rec.deadline = sim.now().plus(rec.timeout);
                    c.append(rec.clone());
                    sim.record(Some(node), "DLOG", format!("txn={txn} step={step} service={service} record=commit"));
                    let msg = TxnMsg::StepTimer {
                        txn,
                        step,
                        service: service.clone(),
                        attempt: 0,
                    };
                    timer(sim, node, rec.timeout.max(query_wait), msg);
                    AckKind::DecideAck
                }
                Phase::Prepared | Phase::Committed => AckKind::DecideAck,
                Phase::Executed => {
                    Self::undo(sim, c, rec, "decide-before-prepare");
                    AckKind::DecideNack
                }
                Phase::Aborted | Phase::Compensated => AckKind::DecideNack,
            },
        };
        Self::ack(sim, node, initiator, txn, step, kind);
    }

    /// Compensates an applied step and releases its lock.
    fn undo<P: Clone + fmt::Debug + From<TxnMsg>>(sim: &mut Sim<P>, c: &mut LocalCoordinator, mut rec: StepRecord, reason: &str) {
        c.apply(&rec.delta.inverse());
        c.release(&rec.delta.key, rec.txn);
        rec.phase = Phase::Compensated;
        let (txn, step) = (rec.txn, rec.step);
        c.append(rec);
        sim.record(
            Some(c.host),
            "COMP",
            format!("txn={txn} step={step} service={} reason={reason}", c.service),
        );
    }

    fn commit_step<P: Clone + fmt::Debug + From<TxnMsg>>(sim: &mut Sim<P>, c: &mut LocalCoordinator, mut rec: StepRecord, how: &str) {
        c.release(&rec.delta.key, rec.txn);
        rec.phase = Phase::Committed;
        let (txn, step) = (rec.txn, rec.step);
        c.append(rec);
        sim.record(Some(c.host), "COMMIT", format!("txn={txn} step={step} service={} via={how}", c.service));
    }

    fn violation<P: Clone + fmt::Debug + From<TxnMsg>>(&mut self, sim: &mut Sim<P>, node: NodeId, what: String) {
        sim.record(Some(node), "VIOLATION", &what);
        self.protocol_violations.push(what);
    }

    fn on_commit<P: Clone + fmt::Debug + From<TxnMsg>>(&mut self, sim: &mut Sim<P>, node: NodeId, service: &ServiceId, txn: TxnId, step: StepId) {
        let Some(initiator) = self.initiators.get(&txn).map(|s| s.workflow.initiator) else {
            return;
        };
        let Some(c) = self.coord_at(service, node) else { return };
        match c.records.get(&(txn, step)).cloned() {
            Some(rec) if rec.phase == Phase::Prepared => {
                Self::commit_step(sim, c, rec, "decision");
                Self::ack(sim, node, initiator, txn, step, AckKind::Committed);
            }
            Some(rec) if rec.phase == Phase::Committed => Self::ack(sim, node, initiator, txn, step, AckKind::Committed),
            other => {
                let what = format!("txn={txn} step={step} commit-in-phase={:?}", other.map(|r| r.phase));
                self.violation(sim, node, what);
            }
        }
    }

    fn on_abort<P: Clone + fmt::Debug + From<TxnMsg>>(&mut self, sim: &mut Sim<P>, node: NodeId, service: &ServiceId, txn: TxnId, step: StepId) {
        let Some(initiator) = self.initiators.get(&txn).map(|s| s.workflow.initiator) else {
            return;
        };
        let Some(c) = self.coord_at(service, node) else { return };
        match c.records.get(&(txn, step)).cloned() {
            None => {
                let mode = self.initiators[&txn].workflow.mode;
                let c = self.coord_at(service, node).expect("coordinator");
                Self::tombstone(sim, c, txn, step, Delta::new("", 0), mode, initiator, "abort-unseen");
            }
            Some(rec) => match rec.phase {
                Phase::Executed | Phase::Prepared => Self::undo(sim, c, rec, "abort"),
                Phase::Committed if rec.mode == TxnMode::Relaxed => Self::undo(sim, c, rec, "saga"),
                Phase::Committed => {
                    self.violation(sim, node, format!("txn={txn} step={step} abort-after-commit"));
                    return;
                }
                Phase::Aborted | Phase::Compensated => {}
            },
        }
        Self::ack(sim, node, initiator, txn, step, AckKind::Aborted);
    }

    fn query_peers<P: Clone + fmt::Debug + From<TxnMsg>>(sim: &mut Sim<P>, c: &LocalCoordinator, rec: &StepRecord) {
        let asker = Participant {
            step: rec.step,
            service: c.service.clone(),
            host: c.host,
        };
        for p in rec.participants.iter().filter(|p| p.step != rec.step) {
            let msg = TxnMsg::Query {
                txn: rec.txn,
                about: p.step,
                service: p.service.clone(),
                asker: asker.clone(),
            };
            send(sim, c.host, p.host, msg);
        }
    }

    fn on_step_timer<P: Clone + fmt::Debug + From<TxnMsg>>(
        &mut self,
        sim: &mut Sim<P>,
        node: NodeId,
        service: &ServiceId,
        txn: TxnId,
        step: StepId,
        attempt: u32,
    ) {
        let query_wait = self.config.query_wait;
        let Some(c) = self.coord_at(service, node) else { return };
        let Some(rec) = c.records.get(&(txn, step)).cloned() else { return };
        if rec.phase.is_final() || rec.mode == TxnMode::Relaxed {
            return;
        }
        let rearm = |sim: &mut Sim<P>, delay: u64, attempt: u32| {
            let msg = TxnMsg::StepTimer {
                txn,
                step,
                service: service.clone(),
                attempt,
            };
            timer(sim, node, delay, msg);
        };
        if sim.now() < rec.deadline {
            // Superseded by a later deadline; a timer for it is already armed.
            return;
        }
        match (rec.phase, rec.decided) {
            (Phase::Executed, _) => Self::undo(sim, c, rec, "timeout"),
            (Phase::Prepared, false) if attempt == 0 => {
                Self::query_peers(sim, c, &rec);
                rearm(sim, query_wait, 1);
            }
            (Phase::Prepared, false) => Self::undo(sim, c, rec, "presumed-abort"),
            (Phase::Prepared, true) => {
                Self::query_peers(sim, c, &rec);
                rearm(sim, query_wait, attempt + 1);
            }
            _ => {}
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_status<P: Clone + fmt::Debug + From<TxnMsg>>(
        &mut self,
        sim: &mut Sim<P>,
        node: NodeId,
        to: &Participant,
        txn: TxnId,
        from_step: StepId,
        phase: Option<Phase>,
        decided: bool,
    ) {
        let Some(c) = self.coord_at(&to.service, node) else { return };
        let Some(rec) = c.records.get(&(txn, to.step)).cloned() else { return };
        if rec.phase.is_final() || rec.phase == Phase::Executed {
            return;
        }
        match phase {
            Some(Phase::Aborted | Phase::Compensated) => Self::undo(sim, c, rec, "peer-aborted"),
            Some(Phase::Committed) => Self::commit_step(sim, c, rec, "peer-committed"),
            Some(p) => {
                let seen = c.peer_status.entry((txn, to.step)).or_default();
                seen.insert(from_step, (p, decided));
                let all_decided = rec
                    .participants
                    .iter()
                    .filter(|q| q.step != to.step)
                    .all(|q| seen.get(&q.step).is_some_and(|(_, d)| *d));
                if rec.decided && all_decided {
                    Self::commit_step(sim, c, rec, "replicated-decision");
                }
            }
            None => {}
        }
    }

    /// Drops volatile state of everything hosted on `node`.
    pub fn on_crash(&mut self, node: NodeId) {
        for c in self.coordinators.values_mut().filter(|c| c.host == node) {
            c.crash();
        }
        for st in self.initiators.values_mut().filter(|s| s.workflow.initiator == node) {
            st.vol = None;
        }
    }

    /// Rebuilds coordinators from their logs and resumes initiators.
    pub fn on_recover<P: Clone + fmt::Debug + From<TxnMsg>>(&mut self, sim: &mut Sim<P>, node: NodeId) {
        let services: Vec<ServiceId> = self.coordinators.values().filter(|c| c.host == node).map(|c| c.service.clone()).collect();
        for s in services {
            let c = self.coordinators.get_mut(&s).expect("coordinator");
            let pending = c.recover();
            sim.record(Some(node), "RECOVERLOG", format!("service={s} pending={}", pending.len()));
            for rec in pending.into_iter().filter(|r| r.mode == TxnMode::Strict) {
                let delay = rec.deadline.since(sim.now()).max(1);
                let msg = TxnMsg::StepTimer {
                    txn: rec.txn,
                    step: rec.step,
                    service: s.clone(),
                    attempt: 0,
                };
                timer(sim, node, delay, msg);
            }
        }
        let txns: Vec<TxnId> = self
            .initiators
            .iter()
            .filter(|(_, s)| s.workflow.initiator == node)
            .map(|(t, _)| *t)
            .collect();
        for txn in txns {
            let st = self.initiators.get_mut(&txn).expect("initiator");
            let phase = match st.durable {
                InitDurable::Done(_) => continue,
                InitDurable::Begun => None,
                InitDurable::Deciding => Some(InitPhase::Deciding),
                InitDurable::Verdict(Verdict::Committed) => {
                    if st.workflow.mode == TxnMode::Relaxed {
                        st.durable = InitDurable::Done(Verdict::Committed);
                        continue;
                    }
                    Some(InitPhase::Committing)
                }
                InitDurable::Verdict(Verdict::Aborted) => Some(InitPhase::Aborting),
            };
            st.vol = Some(InitVolatile {
                phase: phase.unwrap_or(InitPhase::Aborting),
                done: BTreeSet::new(),
                dispatched: BTreeSet::new(),
                acks: BTreeSet::new(),
            });
            match phase {
                // Nothing was decided before the crash: presume abort.
                None => {
                    st.durable = InitDurable::Begun;
                    self.start_abort(sim, txn);
                }
                Some(_) => self.broadcast(sim, txn),
            }
            timer(sim, node, self.config.retry_period, TxnMsg::InitTimer { txn });
        }
    }

    /// Every initiator finished and every logged step reached a final phase.
    pub fn is_quiescent(&self) -> bool {
        self.initiators.values().all(|s| matches!(s.durable, InitDurable::Done(_)))
            && self
                .coordinators
                .values()
                .all(|c| c.latest_records().values().all(|r| r.phase.is_final()))
    }

    /// Checks all-or-nothing per transaction against the coordinator logs,
    /// and that service states equal the initial states plus the effects of
    /// exactly the committed transactions.
    pub fn audit(&self) -> AuditReport {
        let mut report = AuditReport::default();
        let mut expected = self.initial.clone();
        for (&txn, st) in &self.initiators {
            let phases: Vec<(StepId, Option<Phase>)> = st
                .participants
                .iter()
                .map(|p| (p.step, self.coordinators[&p.service].phase_of(txn, p.step)))
                .collect();
            let all_committed = phases.iter().all(|(_, p)| *p == Some(Phase::Committed));
            let none_applied = phases.iter().all(|(_, p)| p.is_none_or(Phase::is_undone));
            let verdict = self.verdict(txn);
            match verdict {
                Some(Verdict::Committed) if all_committed => report.committed.push(txn),
                Some(Verdict::Aborted) | None if none_applied => {
                    if verdict.is_some() {
                        report.aborted.push(txn);
                    } else {
                        report.pending.push(txn);
                    }
                }
                _ if phases.iter().any(|(_, p)| p.is_some_and(|p| !p.is_final())) => {
                    report.pending.push(txn);
                    report.atomicity_violations.push(format!("txn={txn} not quiescent: {phases:?}"));
                }
                _ => report
                    .atomicity_violations
                    .push(format!("txn={txn} verdict={verdict:?} mixed phases {phases:?}")),
            }
            if all_committed && !st.participants.is_empty() {
                for s in &st.workflow.steps {
                    *expected.entry(s.service.clone()).or_default().entry(s.effect.key.clone()).or_insert(0) += s.effect.amount;
                }
            }
        }
        for (svc, c) in &self.coordinators {
            let want = expected.get(svc).cloned().unwrap_or_default();
            let keys: BTreeSet<&String> = want.keys().chain(c.state.keys()).collect();
            for k in keys {
                let (w, got) = (want.get(k).copied().unwrap_or(0), c.state.get(k).copied().unwrap_or(0));
                if w != got {
                    report
                        .atomicity_violations
                        .push(format!("service={svc} key={k} expected={w} actual={got}"));
                }
                if got < 0 {
                    report.consistency_violations.push(format!("service={svc} key={k} negative={got}"));
                }
            }
        }
        report.atomicity_violations.extend(self.protocol_violations.iter().cloned());
        report
    }
}

/// Reads the unique verdict of `txn` from `DECIDE` trace records.
pub fn outcome(txn: TxnId, trace: &Trace) -> Result<TxnStatus, TxnError> {
    let mut found: Option<&str> = None;
    for e in trace.with_tag("DECIDE") {
        if e.field_parse::<TxnId>("txn") != Some(txn) {
            continue;
        }
        let v = e.field("verdict").unwrap_or("");
        match found {
            Some(prev) if prev != v => return Err(TxnError::ConflictingVerdicts(txn)),
            _ => found = Some(v),
        }
    }
    Ok(match found {
        Some("commit") => TxnStatus::Committed,
        Some(_) => TxnStatus::Aborted,
        None => TxnStatus::Pending,
    })
}

/// Drives a simulation whose only protocol is the transaction engine.
pub fn drive(sim: &mut Sim<TxnMsg>, engine: &mut TxnEngine, limit: SimTime) {
    use crate::simnet::EventBody;
    while let Some(ev) = sim.next_event(limit) {
        match ev.body {
            EventBody::Deliver(m) => engine.on_message(sim, m.dst, m.payload),
            EventBody::Timer { node, tag, .. } => engine.on_message(sim, node, tag),
            EventBody::Crash(n) => engine.on_crash(n),
            EventBody::Recover(n) => engine.on_recover(sim, n),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testbed::{self, FaultKind, FaultSpec, Fixture};
    use super::*;
    use crate::simnet::LinkModel;
    use proptest::prelude::*;

    fn svc(i: usize) -> ServiceId {
        ServiceId::new(format!("s{i}"))
    }

    fn setup(services: usize, initial: i64) -> (Sim<TxnMsg>, TxnEngine) {
        let link = LinkModel::default();
        let mut sim = Sim::new(link, 7).unwrap();
        for _ in 0..=services {
            sim.add_node(false);
        }
        let mut engine = TxnEngine::new(TxnConfig::for_link(link.max_delay()));
        for i in 0..services {
            engine.add_service(svc(i), NodeId(i as u32 + 1), BTreeMap::from([("bal".into(), initial)]));
        }
        (sim, engine)
    }

    fn wf(txn: TxnId, mode: TxnMode, steps: Vec<Step>) -> Workflow {
        let n = steps.len();
        Workflow {
            txn_id: txn,
            steps,
            mode,
            initiator: NodeId(0),
            timeout: default_timeout(50, n),
        }
    }

    fn bal(e: &TxnEngine, i: usize) -> i64 {
        e.coordinator(&svc(i)).unwrap().state()["bal"]
    }

    /// Smallest permutation (lexicographically) that respects every dependency.
    fn brute_topo(w: &Workflow) -> Option<Vec<StepId>> {
        fn rec(w: &Workflow, placed: &mut Vec<StepId>, best: &mut Option<Vec<StepId>>) {
            if placed.len() == w.steps.len() {
                if best.as_ref().is_none_or(|b| placed[..] < b[..]) {
                    *best = Some(placed.clone());
                }
                return;
            }
            for s in &w.steps {
                if !placed.contains(&s.step_id) && s.depends_on.iter().all(|d| placed.contains(d)) {
                    placed.push(s.step_id);
                    rec(w, placed, best);
                    placed.pop();
                }
            }
        }
        let mut best = None;
        rec(w, &mut Vec::new(), &mut best);
        best
    }

    proptest! {
        #[test]
        fn topological_order_matches_brute_force(n in 1usize..6, edges in proptest::collection::vec((0u32..6, 0u32..6), 0..10)) {
            let mut steps: Vec<Step> = (0..n).map(|i| Step::new(i as u32, svc(i), Delta::new("bal", 1))).collect();
            for (a, b) in edges {
                if (a as usize) < n && (b as usize) < n && a != b {
                    steps[b as usize].depends_on.insert(a);
                }
            }
            let w = wf(1, TxnMode::Strict, steps);
            let got = w.topological_order().ok();
            prop_assert_eq!(got, brute_topo(&w));
        }

        #[test]
        fn relaxed_state_diff_matches_committed_effects(amounts in proptest::collection::vec(-30i64..30, 1..5), fail_at in proptest::option::of(0usize..5)) {
            let (mut sim, mut eng) = setup(amounts.len(), 20);
            let steps: Vec<Step> = amounts
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let s = Step::new(i as u32, svc(i), Delta::new("bal", *a));
                    let s = if i > 0 { s.after([i as u32 - 1]) } else { s };
                    if fail_at == Some(i) { s.failing() } else { s }
                })
                .collect();
            eng.begin(&mut sim, wf(1, TxnMode::Relaxed, steps)).unwrap();
            drive(&mut sim, &mut eng, SimTime(100_000));
            let should_commit = fail_at.is_none_or(|f| f >= amounts.len()) && amounts.iter().all(|a| 20 + a >= 0);
            let expect: Vec<i64> = amounts.iter().map(|a| if should_commit { 20 + a } else { 20 }).collect();
            let got: Vec<i64> = (0..amounts.len()).map(|i| bal(&eng, i)).collect();
            prop_assert_eq!(got, expect);
            prop_assert_eq!(eng.verdict(1), Some(if should_commit { Verdict::Committed } else { Verdict::Aborted }));
            prop_assert!(eng.audit().is_clean());
        }
    }

    #[test]
    fn cycles_and_unknown_deps_rejected() {
        let a = Step::new(0, svc(0), Delta::new("k", 1)).after([1]);
        let b = Step::new(1, svc(1), Delta::new("k", 1)).after([0]);
        assert!(wf(1, TxnMode::Strict, vec![a, b]).validate().is_err());
        let c = Step::new(0, svc(0), Delta::new("k", 1)).after([9]);
        assert!(wf(1, TxnMode::Strict, vec![c]).validate().is_err());
    }

    #[test]
    fn unknown_service_is_rejected() {
        let (mut sim, mut eng) = setup(1, 0);
        let s = Step::new(0, ServiceId::new("nope"), Delta::new("k", 1));
        assert_eq!(
            eng.begin(&mut sim, wf(1, TxnMode::Strict, vec![s])),
            Err(TxnError::UnknownService(ServiceId::new("nope")))
        );
    }

    #[test]
    fn empty_workflow_commits_immediately() {
        let (mut sim, mut eng) = setup(0, 0);
        eng.begin(&mut sim, wf(1, TxnMode::Strict, vec![])).unwrap();
        assert_eq!(eng.verdict(1), Some(Verdict::Committed));
        assert_eq!(outcome(1, sim.trace()), Ok(TxnStatus::Committed));
    }

    #[test]
    fn strict_fault_free_commit_follows_dependency_order() {
        let (mut sim, mut eng) = setup(3, 100);
        let steps = vec![
            Step::new(0, svc(0), Delta::new("bal", -10)),
            Step::new(1, svc(1), Delta::new("bal", 10)).after([0]),
            Step::new(2, svc(2), Delta::new("bal", 5)).after([1]),
        ];
        eng.begin(&mut sim, wf(1, TxnMode::Strict, steps)).unwrap();
        drive(&mut sim, &mut eng, SimTime(100_000));
        assert_eq!((bal(&eng, 0), bal(&eng, 1), bal(&eng, 2)), (90, 110, 105));
        assert_eq!(outcome(1, sim.trace()), Ok(TxnStatus::Committed));
        let exec_steps: Vec<u32> = sim.trace().with_tag("EXEC").filter_map(|e| e.field_parse("step")).collect();
        assert_eq!(exec_steps, vec![0, 1, 2]);
        assert_eq!(sim.trace().count_tag("DLOG"), 3);
        assert!(eng.is_quiescent());
        assert!(eng.coordinators().all(|c| c.locks().is_empty()));
    }

    #[test]
    fn commit_follows_every_decision_record() {
        let (mut sim, mut eng) = setup(3, 0);
        let steps = (0..3).map(|i| Step::new(i, svc(i as usize), Delta::new("bal", 1))).collect();
        eng.begin(&mut sim, wf(1, TxnMode::Strict, steps)).unwrap();
        drive(&mut sim, &mut eng, SimTime(100_000));
        let entries = sim.trace().entries();
        let last_dlog = entries.iter().rposition(|e| e.event == "DLOG").unwrap();
        let verdict = entries.iter().position(|e| e.event == "DECIDE").unwrap();
        let first_commit = entries.iter().position(|e| e.event == "COMMIT").unwrap();
        assert!(last_dlog < verdict && verdict < first_commit);
    }

    #[test]
    fn failing_step_aborts_strict_without_effects() {
        let (mut sim, mut eng) = setup(3, 100);
        let steps = vec![
            Step::new(0, svc(0), Delta::new("bal", 10)),
            Step::new(1, svc(1), Delta::new("bal", 10)).after([0]),
            Step::new(2, svc(2), Delta::new("bal", 10)).after([1]).failing(),
        ];
        eng.begin(&mut sim, wf(1, TxnMode::Strict, steps)).unwrap();
        drive(&mut sim, &mut eng, SimTime(100_000));
        assert_eq!((bal(&eng, 0), bal(&eng, 1), bal(&eng, 2)), (100, 100, 100));
        assert_eq!(outcome(1, sim.trace()), Ok(TxnStatus::Aborted));
        assert_eq!(sim.trace().count_tag("COMP"), 2);
        assert!(eng.audit().is_clean());
    }

    #[test]
    fn relaxed_compensates_committed_steps() {
        let (mut sim, mut eng) = setup(2, 5);
        let steps = vec![
            Step::new(0, svc(0), Delta::new("bal", 7)),
            Step::new(1, svc(1), Delta::new("bal", -6)).after([0]),
        ];
        eng.begin(&mut sim, wf(1, TxnMode::Relaxed, steps)).unwrap();
        drive(&mut sim, &mut eng, SimTime(100_000));
        assert_eq!((bal(&eng, 0), bal(&eng, 1)), (5, 5));
        let comp = sim.trace().with_tag("COMP").next().unwrap();
        assert_eq!(comp.field("reason"), Some("saga"));
    }

    #[test]
    fn strict_locks_serialise_conflicting_transactions() {
        let (mut sim, mut eng) = setup(1, 10);
        let t1 = wf(1, TxnMode::Strict, vec![Step::new(0, svc(0), Delta::new("bal", -10))]);
        let t2 = wf(2, TxnMode::Strict, vec![Step::new(0, svc(0), Delta::new("bal", -10))]);
        eng.begin(&mut sim, t1).unwrap();
        eng.begin(&mut sim, t2).unwrap();
        drive(&mut sim, &mut eng, SimTime(100_000));
        let verdicts = [eng.verdict(1), eng.verdict(2)];
        assert_eq!(verdicts.iter().filter(|v| **v == Some(Verdict::Committed)).count(), 1);
        assert_eq!(bal(&eng, 0), 0);
        assert!(eng.audit().is_clean());
    }

    #[test]
    fn conflicting_verdicts_detected() {
        let mut t = Trace::default();
        t.record(SimTime(1), None, "DECIDE", "txn=4 verdict=commit");
        t.record(SimTime(2), None, "DECIDE", "txn=4 verdict=abort");
        assert_eq!(outcome(4, &t), Err(TxnError::ConflictingVerdicts(4)));
        assert_eq!(outcome(5, &t), Ok(TxnStatus::Pending));
    }

    #[test]
    fn initiator_crash_while_deciding_recovers_to_commit() {
        let fx = Fixture::chain(2, TxnMode::Strict);
        let clean = testbed::run(&fx, &[], 3);
        let deciding_at = clean.trace.with_tag("DLOG").next().unwrap().tick.ticks();
        let crash = FaultSpec {
            kind: FaultKind::Crash,
            node: NodeId(0),
            at: deciding_at,
            duration: 5000,
        };
        let r = testbed::run(&fx, &[crash], 3);
        assert!(r.audit.is_clean(), "{:?}", r.audit);
        assert!(r.quiescent);
        assert_eq!(r.verdict, Some(Verdict::Committed));
    }

    #[test]
    fn participant_crash_before_prepare_aborts() {
        let fx = Fixture::chain(2, TxnMode::Strict);
        let crash = FaultSpec {
            kind: FaultKind::Crash,
            node: NodeId(2),
            at: 1,
            duration: 5000,
        };
        let r = testbed::run(&fx, &[crash], 3);
        assert!(r.audit.is_clean(), "{:?}", r.audit);
        assert_eq!(r.verdict, Some(Verdict::Aborted));
        assert_eq!(r.engine.coordinator(&svc(0)).unwrap().state()["bal"], 100);
    }

    #[test]
    fn committed_state_survives_crash() {
        let fx = Fixture::chain(2, TxnMode::Strict);
        let clean = testbed::run(&fx, &[], 3);
        let end = clean.trace.entries().last().unwrap().tick.ticks();
        let crash = FaultSpec {
            kind: FaultKind::Crash,
            node: NodeId(1),
            at: end + 1,
            duration: 100,
        };
        let r = testbed::run(&fx, &[crash], 3);
        assert_eq!(r.engine.coordinator(&svc(0)).unwrap().state()["bal"], 110);
        assert_eq!(r.engine.coordinator(&svc(0)).unwrap().phase_of(1, 0), Some(Phase::Committed));
    }

    #[test]
    fn single_fault_enumeration_is_atomic() {
        for mode in [TxnMode::Strict, TxnMode::Relaxed] {
            let s = testbed::explore(&Fixture::chain(3, mode), 1, 1);
            assert!(s.violations.is_empty(), "{mode:?}: {:?}", &s.violations[..s.violations.len().min(3)]);
            assert_eq!(s.non_quiescent, 0);
            assert!(s.committed > 0 && s.aborted > 0);
        }
    }
}
