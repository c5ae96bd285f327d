//! Dynamic virtual super-peer: nomination, strict-majority approval
//! elections, 24-hour coverage maintenance, demotion and overlay routing.
//!
//! The cluster is a set of peers that jointly act as one always-available
//! super-peer. Membership is re-elected whenever coverage or size drops
//! below target. NAT-flagged peers are reachable only through their
//! designated member, so routes to them always go `src → relay → dst`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::peers::{ClusterId, PeerState, Roster, Thresholds};
use crate::simnet::{NodeId, Sim, SimTime, Trace};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum DvspError {
    #[error("no eligible candidates")]
    NoCandidates,
    #[error("election round {0} elected nobody")]
    ElectionFailed(u64),
    #[error("no route from {src} to {dst}")]
    NoRoute { src: NodeId, dst: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElectorateRule {
    /// Peers online at round start.
    Online,
    /// Every peer that is not crashed, present or scheduled away.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvspConfig {
    pub thresholds: Thresholds,
    /// Members required per hour slot for it to count as covered.
    pub min_redundancy: u32,
    pub coverage_target: f64,
    pub max_cluster_size: usize,
    pub min_members: usize,
    pub maintenance_period: u64,
    pub electorate: ElectorateRule,
}

impl Default for DvspConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            min_redundancy: 1,
            coverage_target: 1.0,
            max_cluster_size: 7,
            min_members: 3,
            maintenance_period: 3_600,
            electorate: ElectorateRule::Online,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperPeerCluster {
    pub cluster_id: ClusterId,
    pub members: BTreeSet<NodeId>,
    pub min_redundancy: u32,
    pub formed_at: SimTime,
}

impl SuperPeerCluster {
    pub fn new(cluster_id: ClusterId, members: impl IntoIterator<Item = NodeId>, min_redundancy: u32, formed_at: SimTime) -> Self {
        Self {
            cluster_id,
            members: members.into_iter().collect(),
            min_redundancy: min_redundancy.max(1),
            formed_at,
        }
    }

    /// Members available in each hour of the day. Crashed members count as absent.
    pub fn coverage_map(&self, roster: &Roster) -> [u32; 24] {
        let mut map = [0u32; 24];
        for m in &self.members {
            let Some(p) = roster.get(*m) else { continue };
            if p.state == PeerState::Offline {
                continue;
            }
            for (h, slot) in map.iter_mut().enumerate() {
                if p.windows.iter().any(|w| w.covers(h as u8)) {
                    *slot += 1;
                }
            }
        }
        map
    }

    /// Members available right now.
    pub fn available_members<'a>(&'a self, roster: &'a Roster, now: SimTime) -> impl Iterator<Item = NodeId> + 'a {
        self.members
            .iter()
            .copied()
            .filter(move |m| roster.get(*m).is_some_and(|p| p.is_online(now)))
    }
}

/// Fraction of hour slots with at least `min_redundancy` available members.
pub fn coverage(cluster: &SuperPeerCluster, roster: &Roster) -> f64 {
    let k = cluster.min_redundancy;
    let covered = cluster.coverage_map(roster).iter().filter(|&&c| c >= k).count();
    covered as f64 / 24.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ballot {
    pub voter: NodeId,
    pub candidate: NodeId,
    pub approve: bool,
    pub basis: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElectionRound {
    pub round_id: u64,
    pub electorate: BTreeSet<NodeId>,
    pub candidates: Vec<NodeId>,
    pub ballots: Vec<Ballot>,
    pub outcome: Vec<NodeId>,
}

/// Eligible, directly reachable (non-NAT) peers ranked by median observer
/// reliability, then availability, then id.
pub fn nominate_candidates(roster: &Roster, now: SimTime, thresholds: &Thresholds) -> Result<Vec<NodeId>, DvspError> {
    let mut ranked: Vec<(f64, f64, NodeId)> = roster
        .profiles()
        .filter(|p| !p.nat && roster.is_eligible(p.id, now, thresholds))
        .map(|p| (roster.median_observer_score(p.id, now), p.availability(), p.id))
        .collect();
    if ranked.is_empty() {
        return Err(DvspError::NoCandidates);
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    Ok(ranked.into_iter().map(|(_, _, id)| id).collect())
}

pub fn electorate(roster: &Roster, now: SimTime, rule: ElectorateRule) -> BTreeSet<NodeId> {
    match rule {
        ElectorateRule::Online => roster.online(now).collect(),
        ElectorateRule::All => roster.profiles().filter(|p| p.state != PeerState::Offline).map(|p| p.id).collect(),
    }
}

/// Each voter approves a candidate iff its own local score of the candidate
/// reaches `r_min`.
pub fn cast_ballots(roster: &Roster, now: SimTime, electorate: &BTreeSet<NodeId>, candidates: &[NodeId], r_min: f64) -> Vec<Ballot> {
    let mut ballots = Vec::with_capacity(electorate.len() * candidates.len());
    for &voter in electorate {
        for &candidate in candidates {
            let basis = roster.local_score(voter, candidate, now);
            ballots.push(Ballot {
                voter,
                candidate,
                approve: basis >= r_min,
                basis,
            });
        }
    }
    ballots
}

/// Tallies approvals. A candidate needs strictly more than half of the
/// electorate; winners keep nomination order and are capped at `max_size`.
pub fn run_election(round: &mut ElectionRound, max_size: usize) -> Result<Vec<NodeId>, DvspError> {
    let mut approvals: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for b in &round.ballots {
        if !round.electorate.contains(&b.voter) || !seen.insert((b.voter, b.candidate)) {
            continue;
        }
        if b.approve {
            *approvals.entry(b.candidate).or_default() += 1;
        }
    }
    let n = round.electorate.len();
    round.outcome = round
        .candidates
        .iter()
        .copied()
        .filter(|c| 2 * approvals.get(c).copied().unwrap_or(0) > n)
        .take(max_size)
        .collect();
    if round.outcome.is_empty() {
        Err(DvspError::ElectionFailed(round.round_id))
    } else {
        Ok(round.outcome.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemotionReason {
    Crashed,
    Reliability,
    Availability,
}

impl DemotionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DemotionReason::Crashed => "crashed",
            DemotionReason::Reliability => "reliability",
            DemotionReason::Availability => "availability",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaintenanceAction {
    Demote(NodeId, DemotionReason),
    TriggerElection,
}

/// One maintenance pass. Demotions come first; coverage and size are then
/// judged on the members that remain.
pub fn maintain(cluster: &SuperPeerCluster, roster: &Roster, now: SimTime, config: &DvspConfig) -> Vec<MaintenanceAction> {
    let mut actions = Vec::new();
    let mut kept = cluster.clone();
    for &m in &cluster.members {
        let reason = match roster.get(m) {
            None => Some(DemotionReason::Crashed),
            Some(p) if p.state == PeerState::Offline => Some(DemotionReason::Crashed),
            Some(p) if p.history.score(now, &roster.params) < config.thresholds.r_min => Some(DemotionReason::Reliability),
            Some(p) if p.availability() < config.thresholds.a_min => Some(DemotionReason::Availability),
            _ => None,
        };
        if let Some(r) = reason {
            actions.push(MaintenanceAction::Demote(m, r));
            kept.members.remove(&m);
        }
    }
    if kept.members.len() < config.min_members || coverage(&kept, roster) < config.coverage_target {
        actions.push(MaintenanceAction::TriggerElection);
    }
    actions
}

fn join(ids: impl IntoIterator<Item = NodeId>) -> String {
    ids.into_iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

/// Stateful driver: owns the current cluster and records every ballot,
/// election, demotion and reconfiguration in the trace.
#[derive(Debug, Clone)]
pub struct Dvsp {
    pub config: DvspConfig,
    pub cluster: SuperPeerCluster,
    next_round: u64,
    pub elections: u64,
    pub failed_elections: u64,
    pub demotions: u64,
}

impl Dvsp {
    pub fn new(config: DvspConfig, cluster_id: ClusterId) -> Self {
        Self {
            cluster: SuperPeerCluster::new(cluster_id, [], config.min_redundancy, SimTime::ZERO),
            config,
            next_round: 0,
            elections: 0,
            failed_elections: 0,
            demotions: 0,
        }
    }

    /// A fixed cluster, installed without an election.
    pub fn install(&mut self, roster: &mut Roster, members: impl IntoIterator<Item = NodeId>, now: SimTime, trace: &mut Trace) {
        let id = self.cluster.cluster_id;
        for m in &self.cluster.members {
            if roster.get(*m).is_some_and(|p| p.is_member()) {
                roster.set_state(*m, PeerState::Regular);
            }
        }
        self.cluster = SuperPeerCluster::new(id, members, self.config.min_redundancy, now);
        for m in &self.cluster.members {
            roster.set_state(*m, PeerState::SuperPeerMember(id));
        }
        trace.record(
            now,
            None,
            "RECONF",
            format!(
                "cluster={id} members={} coverage={:.6}",
                join(self.cluster.members.iter().copied()),
                coverage(&self.cluster, roster)
            ),
        );
    }

    pub fn coverage(&self, roster: &Roster) -> f64 {
        coverage(&self.cluster, roster)
    }

    /// Runs one full round. On failure the previous membership stays.
    pub fn elect(&mut self, roster: &mut Roster, now: SimTime, trace: &mut Trace) -> Result<ElectionRound, DvspError> {
        let round_id = self.next_round;
        self.next_round += 1;
        let th = self.config.thresholds;
        let candidates = match nominate_candidates(roster, now, &th) {
            Ok(c) => c,
            Err(e) => {
                self.failed_elections += 1;
                trace.record(now, None, "ELECTFAIL", format!("round={round_id} reason=no-candidates"));
                return Err(e);
            }
        };
        let voters = electorate(roster, now, self.config.electorate);
        let ballots = cast_ballots(roster, now, &voters, &candidates, th.r_min);
        let mut round = ElectionRound {
            round_id,
            electorate: voters,
            candidates,
            ballots,
            outcome: Vec::new(),
        };
        trace.record(
            now,
            None,
            "ROUND",
            format!(
                "round={round_id} electorate={} candidates={}",
                join(round.electorate.iter().copied()),
                join(round.candidates.iter().copied())
            ),
        );
        for b in &round.ballots {
            trace.record(
                now,
                Some(b.voter),
                "BALLOT",
                format!(
                    "round={round_id} candidate={} approve={} basis={:.6}",
                    b.candidate,
                    u8::from(b.approve),
                    b.basis
                ),
            );
        }
        match run_election(&mut round, self.config.max_cluster_size) {
            Ok(elected) => {
                debug_assert!(elected.iter().all(|m| roster.is_eligible(*m, now, &th)));
                self.elections += 1;
                for m in &elected {
                    let approvals = round.ballots.iter().filter(|b| b.candidate == *m && b.approve).count();
                    let eligible = roster.is_eligible(*m, now, &th);
                    trace.record(
                        now,
                        Some(*m),
                        "ELECT",
                        format!(
                            "round={round_id} approvals={approvals} electorate={} eligible={}",
                            round.electorate.len(),
                            u8::from(eligible)
                        ),
                    );
                }
                self.install(roster, elected, now, trace);
                Ok(round)
            }
            Err(e) => {
                self.failed_elections += 1;
                trace.record(now, None, "ELECTFAIL", format!("round={round_id} reason=no-majority"));
                Err(e)
            }
        }
    }

    /// Applies [`maintain`]: demotes, then re-elects when required.
    pub fn maintenance_pass(&mut self, roster: &mut Roster, now: SimTime, trace: &mut Trace) -> Vec<MaintenanceAction> {
        let actions = maintain(&self.cluster, roster, now, &self.config);
        for a in &actions {
            match *a {
                MaintenanceAction::Demote(m, reason) => {
                    self.cluster.members.remove(&m);
                    if roster.get(m).is_some_and(|p| p.is_member()) {
                        roster.set_state(m, PeerState::Regular);
                    }
                    self.demotions += 1;
                    trace.record(
                        now,
                        Some(m),
                        "DEMOTE",
                        format!("cluster={} reason={}", self.cluster.cluster_id, reason.as_str()),
                    );
                }
                MaintenanceAction::TriggerElection => {
                    trace.record(
                        now,
                        None,
                        "TRIGGER",
                        format!("members={} coverage={:.6}", self.cluster.members.len(), coverage(&self.cluster, roster)),
                    );
                    let _ = self.elect(roster, now, trace);
                }
            }
        }
        actions
    }

    /// Re-designates relays for NAT peers round-robin over members available now.
    pub fn assign_relays(&self, roster: &Roster, now: SimTime) -> BTreeMap<NodeId, Option<NodeId>> {
        let available: Vec<NodeId> = self.cluster.available_members(roster, now).collect();
        roster
            .profiles()
            .filter(|p| p.nat)
            .enumerate()
            .map(|(i, p)| {
                let relay = (!available.is_empty()).then(|| available[i % available.len()]);
                (p.id, relay)
            })
            .collect()
    }
}

/// What routing needs to know about the network right now.
pub trait Reachability {
    fn online(&self, n: NodeId) -> bool;
    fn nat(&self, n: NodeId) -> bool;
    fn separated(&self, a: NodeId, b: NodeId) -> bool;
    fn relay_of(&self, n: NodeId) -> Option<NodeId>;
}

impl<P: Clone + std::fmt::Debug> Reachability for Sim<P> {
    fn online(&self, n: NodeId) -> bool {
        self.is_online(n)
    }
    fn nat(&self, n: NodeId) -> bool {
        self.is_nat(n)
    }
    fn separated(&self, a: NodeId, b: NodeId) -> bool {
        Sim::separated(self, a, b)
    }
    fn relay_of(&self, n: NodeId) -> Option<NodeId> {
        Sim::relay_of(self, n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayRoute {
    pub hops: Vec<NodeId>,
}

impl OverlayRoute {
    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    pub fn next_hop(&self) -> Option<NodeId> {
        self.hops.get(1).copied()
    }

    /// Every NAT-flagged receiver is preceded by its designated relay.
    pub fn respects_nat<R: Reachability>(&self, net: &R) -> bool {
        self.hops.windows(2).all(|w| !net.nat(w[1]) || net.relay_of(w[1]) == Some(w[0]))
    }
}

/// Shortest overlay route: direct when possible, otherwise one hop through
/// a super-peer member (the designated relay for NAT-flagged targets).
pub fn route<R: Reachability>(net: &R, members: &BTreeSet<NodeId>, src: NodeId, dst: NodeId) -> Result<OverlayRoute, DvspError> {
    let no_route = DvspError::NoRoute { src, dst };
    if src == dst {
        return Ok(OverlayRoute { hops: vec![src] });
    }
    if !net.online(src) || !net.online(dst) {
        return Err(no_route);
    }
    let link_ok = |a: NodeId, b: NodeId| net.online(a) && net.online(b) && !net.separated(a, b) && (!net.nat(b) || net.relay_of(b) == Some(a));
    if link_ok(src, dst) {
        return Ok(OverlayRoute { hops: vec![src, dst] });
    }
    let relays: Vec<NodeId> = if net.nat(dst) {
        net.relay_of(dst).into_iter().filter(|r| members.contains(r)).collect()
    } else {
        members.iter().copied().collect()
    };
    relays
        .into_iter()
        .find(|&m| m != src && m != dst && link_ok(src, m) && link_ok(m, dst))
        .map(|m| OverlayRoute { hops: vec![src, m, dst] })
        .ok_or(no_route)
}
