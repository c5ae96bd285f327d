//! Deterministic discrete-event network substrate.
//!
//! One [`Sim`] owns simulated time, the event queue, the node table, the link
//! model, active partitions and the execution [`Trace`]. Higher layers drive
//! it by pulling events with [`Sim::next_event`] and reacting to them; the
//! substrate itself only decides delivery, drop, crash and timer semantics.
//!
//! Events are processed in `(at, seq)` order where `seq` is the global
//! insertion counter, so every run with the same inputs and seed is
//! bit-for-bit repeatable.

pub mod topology;
pub mod trace;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use trace::{Trace, TraceEntry};

pub const TICKS_PER_HOUR: u64 = 3_600;
pub const TICKS_PER_DAY: u64 = 86_400;

/// Simulated time. One tick is one simulated second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn ticks(self) -> u64 {
        self.0
    }

    /// Hour of the simulated day, `(ticks / 3600) mod 24`.
    pub fn hour_of_day(self) -> u8 {
        ((self.0 / TICKS_PER_HOUR) % 24) as u8
    }

    pub fn plus(self, ticks: u64) -> SimTime {
        SimTime(self.0.saturating_add(ticks))
    }

    pub fn since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message<P> {
    pub id: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: String,
    pub payload: P,
    pub sent_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkModel {
    pub base_latency: u64,
    pub jitter_max: u64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            base_latency: 50,
            jitter_max: 20,
        }
    }
}

impl LinkModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.base_latency == 0 {
            return Err(SimError::BadParams("base_latency must be >= 1".into()));
        }
        Ok(())
    }

    /// Worst-case one-way delay.
    pub fn max_delay(&self) -> u64 {
        self.base_latency + self.jitter_max
    }
}

/// Disjoint node groups isolated from each other during `[start, end)`.
///
/// Nodes that appear in no group are not constrained by the partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub groups: Vec<BTreeSet<NodeId>>,
    pub start: SimTime,
    pub end: SimTime,
}

impl Partition {
    pub fn new(groups: Vec<BTreeSet<NodeId>>, start: SimTime, end: SimTime) -> Result<Self, SimError> {
        if start >= end {
            return Err(SimError::BadParams(format!("partition start {start} >= end {end}")));
        }
        let mut seen = BTreeSet::new();
        for g in &groups {
            for n in g {
                if !seen.insert(*n) {
                    return Err(SimError::BadParams(format!("node {n} appears in two partition groups")));
                }
            }
        }
        Ok(Self { groups, start, end })
    }

    fn group_of(&self, n: NodeId) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&n))
    }

    /// True when `a` and `b` sit in different groups.
    pub fn separates(&self, a: NodeId, b: NodeId) -> bool {
        match (self.group_of(a), self.group_of(b)) {
            (Some(x), Some(y)) => x != y,
            _ => false,
        }
    }

    fn describe(&self) -> String {
        self.groups
            .iter()
            .map(|g| g.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("|")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    Crash(NodeId),
    Recover(NodeId),
    Partition(Partition),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventBody<P> {
    Deliver(Message<P>),
    Crash(NodeId),
    Recover(NodeId),
    Timer { node: NodeId, tag: P, epoch: u64 },
    PartitionBegin(usize),
    PartitionEnd(usize),
    Noop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub at: SimTime,
    pub seq: u64,
    pub body: EventBody<P>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle {
    pub at: SimTime,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Offline,
    Partitioned,
    NatUnreachable,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::Offline => "offline",
            DropReason::Partitioned => "partitioned",
            DropReason::NatUnreachable => "nat",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Scheduled { id: u64, at: SimTime },
    Dropped { id: u64, reason: DropReason },
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("cannot schedule at {at}: current time is {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("bad parameters: {0}")]
    BadParams(String),
}

#[derive(Debug, Clone, Default)]
struct NodeSlot {
    up: bool,
    available: bool,
    nat: bool,
    relay: Option<NodeId>,
    /// Bumped on every crash; timers armed in an older epoch are discarded.
    epoch: u64,
    volatile: BTreeMap<String, String>,
    durable: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimStats {
    pub processed: u64,
    pub messages_sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

pub struct Sim<P> {
    now: SimTime,
    next_seq: u64,
    next_msg: u64,
    queue: BinaryHeap<Reverse<(SimTime, u64)>>,
    pending: HashMap<u64, EventBody<P>>,
    nodes: Vec<NodeSlot>,
    link: LinkModel,
    partitions: Vec<Partition>,
    active: BTreeSet<usize>,
    rng: ChaCha8Rng,
    trace: Trace,
    stats: SimStats,
    trace_messages: bool,
}

impl<P: Clone + fmt::Debug> Sim<P> {
    pub fn new(link: LinkModel, seed: u64) -> Result<Self, SimError> {
        link.validate()?;
        Ok(Self {
            now: SimTime::ZERO,
            next_seq: 0,
            next_msg: 0,
            queue: BinaryHeap::new(),
            pending: HashMap::new(),
            nodes: Vec::new(),
            link,
            partitions: Vec::new(),
            active: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: Trace::new(),
            stats: SimStats::default(),
            trace_messages: true,
        })
    }

    /// Disables SEND/DELIVER/DROP trace records. Counters are still kept.
    pub fn set_message_tracing(&mut self, on: bool) {
        self.trace_messages = on;
    }

    pub fn add_node(&mut self, nat: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(NodeSlot {
            up: true,
            available: true,
            nat,
            ..NodeSlot::default()
        });
        id
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    fn slot(&self, n: NodeId) -> Result<&NodeSlot, SimError> {
        self.nodes.get(n.0 as usize).ok_or(SimError::UnknownNode(n))
    }

    fn slot_mut(&mut self, n: NodeId) -> Result<&mut NodeSlot, SimError> {
        self.nodes.get_mut(n.0 as usize).ok_or(SimError::UnknownNode(n))
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn link(&self) -> LinkModel {
        self.link
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// For protocol layers that record with an explicit tick.
    pub fn trace_mut(&mut self) -> &mut Trace {
        &mut self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn record(&mut self, node: Option<NodeId>, event: &str, detail: impl AsRef<str>) {
        self.trace.record(self.now, node, event, detail);
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn is_nat(&self, n: NodeId) -> bool {
        self.slot(n).map(|s| s.nat).unwrap_or(false)
    }

    /// Designated relay for a NAT-flagged node.
    pub fn relay_of(&self, n: NodeId) -> Option<NodeId> {
        self.slot(n).ok().and_then(|s| s.relay)
    }

    pub fn set_relay(&mut self, n: NodeId, relay: Option<NodeId>) -> Result<(), SimError> {
        if let Some(r) = relay {
            self.slot(r)?;
        }
        self.slot_mut(n)?.relay = relay;
        Ok(())
    }

    /// Not crashed.
    pub fn is_up(&self, n: NodeId) -> bool {
        self.slot(n).map(|s| s.up).unwrap_or(false)
    }

    pub fn is_online(&self, n: NodeId) -> bool {
        self.slot(n).map(|s| s.up && s.available).unwrap_or(false)
    }

    /// Scheduled presence. Leaving is graceful: no state is lost.
    pub fn set_available(&mut self, n: NodeId, available: bool) -> Result<(), SimError> {
        let slot = self.slot_mut(n)?;
        if slot.available != available {
            slot.available = available;
            let tag = if available { "JOIN" } else { "LEAVE" };
            self.record(Some(n), tag, "");
        }
        Ok(())
    }

    pub fn epoch(&self, n: NodeId) -> u64 {
        self.slot(n).map(|s| s.epoch).unwrap_or(0)
    }

    /// True if an active partition separates `a` from `b`.
    pub fn separated(&self, a: NodeId, b: NodeId) -> bool {
        self.active.iter().any(|&i| self.partitions[i].separates(a, b))
    }

    pub fn active_partitions(&self) -> impl Iterator<Item = &Partition> {
        self.active.iter().map(|&i| &self.partitions[i])
    }

    pub fn volatile(&self, n: NodeId) -> &BTreeMap<String, String> {
        &self.nodes[n.0 as usize].volatile
    }

    pub fn volatile_mut(&mut self, n: NodeId) -> &mut BTreeMap<String, String> {
        &mut self.nodes[n.0 as usize].volatile
    }

    /// Introspection hook for crash-amnesia checks.
    pub fn volatile_keys(&self, n: NodeId) -> Vec<String> {
        self.volatile(n).keys().cloned().collect()
    }

    pub fn durable(&self, n: NodeId) -> &[String] {
        &self.nodes[n.0 as usize].durable
    }

    pub fn durable_append(&mut self, n: NodeId, record: impl Into<String>) {
        self.nodes[n.0 as usize].durable.push(record.into());
    }

    pub fn schedule(&mut self, at: SimTime, body: EventBody<P>) -> Result<EventHandle, SimError> {
        if at < self.now {
            return Err(SimError::SchedulingInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse((at, seq)));
        self.pending.insert(seq, body);
        Ok(EventHandle { at, seq })
    }

    /// Arms a timer that fires on `node` after `delay` ticks unless the
    /// node crashes first.
    pub fn set_timer(&mut self, node: NodeId, delay: u64, tag: P) -> Result<EventHandle, SimError> {
        let epoch = self.slot(node)?.epoch;
        let at = self.now.plus(delay);
        self.schedule(at, EventBody::Timer { node, tag, epoch })
    }

    pub fn send(&mut self, src: NodeId, dst: NodeId, kind: &str, payload: P) -> Result<SendOutcome, SimError> {
        self.slot(src)?;
        let dst_slot = self.slot(dst)?;
        let nat_blocked = dst_slot.nat && dst_slot.relay != Some(src) && src != dst;
        let id = self.next_msg;
        self.next_msg += 1;
        self.stats.messages_sent += 1;
        if self.trace_messages {
            self.record(Some(src), "SEND", format!("id={id} dst={dst} kind={kind}"));
        }
        if nat_blocked {
            self.stats.dropped += 1;
            if self.trace_messages {
                self.record(Some(dst), "DROP", format!("id={id} src={src} reason=nat"));
            }
            return Ok(SendOutcome::Dropped {
                id,
                reason: DropReason::NatUnreachable,
            });
        }
        let jitter = if self.link.jitter_max > 0 {
            self.rng.gen_range(0..=self.link.jitter_max)
        } else {
            0
        };
        let at = self.now.plus(self.link.base_latency + jitter);
        let msg = Message {
            id,
            src,
            dst,
            kind: kind.to_string(),
            payload,
            sent_at: self.now,
        };
        self.schedule(at, EventBody::Deliver(msg))?;
        Ok(SendOutcome::Scheduled { id, at })
    }

    /// Applies a fault at the current tick.
    pub fn inject_fault(&mut self, fault: Fault) -> Result<(), SimError> {
        match fault {
            Fault::Crash(n) => {
                self.slot(n)?;
                self.apply_crash(n);
            }
            Fault::Recover(n) => {
                self.slot(n)?;
                self.apply_recover(n);
            }
            Fault::Partition(p) => {
                self.install_partition(p)?;
            }
        }
        Ok(())
    }

    /// Schedules a fault for a future tick. Partitions carry their own window.
    pub fn schedule_fault(&mut self, at: SimTime, fault: Fault) -> Result<(), SimError> {
        match fault {
            Fault::Crash(n) => {
                self.slot(n)?;
                self.schedule(at, EventBody::Crash(n))?;
            }
            Fault::Recover(n) => {
                self.slot(n)?;
                self.schedule(at, EventBody::Recover(n))?;
            }
            Fault::Partition(p) => {
                self.install_partition(p)?;
            }
        }
        Ok(())
    }

    fn install_partition(&mut self, p: Partition) -> Result<(), SimError> {
        for n in p.groups.iter().flatten() {
            self.slot(*n)?;
        }
        let start = p.start.max(self.now);
        if p.end <= start {
            return Ok(());
        }
        let idx = self.partitions.len();
        let end = p.end;
        self.partitions.push(p);
        self.schedule(start, EventBody::PartitionBegin(idx))?;
        self.schedule(end, EventBody::PartitionEnd(idx))?;
        Ok(())
    }

    fn apply_crash(&mut self, n: NodeId) {
        let slot = &mut self.nodes[n.0 as usize];
        if !slot.up {
            self.record(Some(n), "CRASH", "noop=already-down");
            return;
        }
        slot.up = false;
        slot.epoch += 1;
        slot.volatile.clear();
        self.record(Some(n), "CRASH", "");
    }

    fn apply_recover(&mut self, n: NodeId) {
        let slot = &mut self.nodes[n.0 as usize];
        if slot.up {
            self.record(Some(n), "RECOVER", "noop=already-up");
            return;
        }
        slot.up = true;
        self.record(Some(n), "RECOVER", "");
    }

    /// Time of the next queued event, if any.
    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse((at, _))| *at)
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Pops and processes the next event strictly before `limit`.
    ///
    /// Substrate-level outcomes (drops, stale timers, partition toggles) are
    /// handled here and skipped; the events a protocol must react to are
    /// returned: deliveries, live timers, crashes, recoveries and no-ops.
    pub fn next_event(&mut self, limit: SimTime) -> Option<Event<P>> {
        loop {
            let Reverse((at, seq)) = *self.queue.peek()?;
            if at >= limit {
                return None;
            }
            self.queue.pop();
            let body = self.pending.remove(&seq).expect("queued event has a body");
            self.now = at;
            self.stats.processed += 1;
            let surfaced = match body {
                EventBody::Deliver(msg) => self.deliver(msg).map(EventBody::Deliver),
                EventBody::Timer { node, tag, epoch } => {
                    let slot = &self.nodes[node.0 as usize];
                    (slot.up && slot.epoch == epoch).then_some(EventBody::Timer { node, tag, epoch })
                }
                EventBody::Crash(n) => {
                    let was_up = self.nodes[n.0 as usize].up;
                    self.apply_crash(n);
                    was_up.then_some(EventBody::Crash(n))
                }
                EventBody::Recover(n) => {
                    let was_down = !self.nodes[n.0 as usize].up;
                    self.apply_recover(n);
                    was_down.then_some(EventBody::Recover(n))
                }
                EventBody::PartitionBegin(i) => {
                    self.active.insert(i);
                    let d = self.partitions[i].describe();
                    self.record(None, "PARTITION", format!("id={i} groups={d}"));
                    None
                }
                EventBody::PartitionEnd(i) => {
                    self.active.remove(&i);
                    self.record(None, "HEAL", format!("id={i}"));
                    None
                }
                EventBody::Noop => Some(EventBody::Noop),
            };
            if let Some(body) = surfaced {
                return Some(Event { at, seq, body });
            }
        }
    }

    fn deliver(&mut self, msg: Message<P>) -> Option<Message<P>> {
        let reason = if !self.is_online(msg.dst) {
            Some(DropReason::Offline)
        } else if self.separated(msg.src, msg.dst) {
            Some(DropReason::Partitioned)
        } else {
            None
        };
        match reason {
            Some(r) => {
                self.stats.dropped += 1;
                if self.trace_messages {
                    self.record(Some(msg.dst), "DROP", format!("id={} src={} reason={r}", msg.id, msg.src));
                }
                None
            }
            None => {
                self.stats.delivered += 1;
                if self.trace_messages {
                    self.record(Some(msg.dst), "DELIVER", format!("id={} src={} kind={}", msg.id, msg.src, msg.kind));
                }
                Some(msg)
            }
        }
    }

    /// Moves the clock forward to `t` once the queue holds nothing before it.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Processes every event before `t` without a protocol layer and returns
    /// the trace entries added meanwhile.
    pub fn run_until(&mut self, t: SimTime) -> Vec<TraceEntry> {
        let start = self.trace.len();
        while self.next_event(t).is_some() {}
        self.advance_to(t);
        self.trace.entries()[start..].to_vec()
    }
}
