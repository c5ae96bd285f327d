#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use dbe_core::dvsp::{Dvsp, DvspConfig, ElectorateRule};
use dbe_core::peers::{AvailabilityWindow, Capacity, ClusterId, PeerProfile, PeerState, ReliabilityParams, Roster, Thresholds};
use dbe_core::simnet::{NodeId, SimTime, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best product over every simple path of at most `depth` edges.
pub fn best_path(adj: &[Vec<f64>], a: usize, b: usize, depth: usize) -> f64 {
    fn walk(adj: &[Vec<f64>], at: usize, b: usize, acc: f64, left: usize, seen: &mut Vec<bool>, best: &mut f64) {
        if at == b {
            *best = best.max(acc);
            return;
        }
        if left == 0 {
            return;
        }
        for next in 0..adj.len() {
            let w = adj[at][next];
            if w > 0.0 && !seen[next] {
                seen[next] = true;
                walk(adj, next, b, acc * w, left - 1, seen, best);
                seen[next] = false;
            }
        }
    }
    if a == b {
        return 1.0;
    }
    let mut seen = vec![false; adj.len()];
    seen[a] = true;
    let mut best = 0.0;
    walk(adj, a, b, 1.0, depth, &mut seen, &mut best);
    best
}

/// A randomly drawn election setting, kept in plain form for the oracle.
pub struct ElectionCase {
    pub n: u32,
    pub windows: Vec<(u8, u8)>,
    pub nat: Vec<bool>,
    pub crashed: Vec<bool>,
    /// (time, observer, subject, success) in time order.
    pub observations: Vec<(u64, u32, u32, bool)>,
    pub now: u64,
    pub thresholds: Thresholds,
    pub rule: ElectorateRule,
    pub max_cluster: usize,
}

impl ElectionCase {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..=12);
        let windows = (0..n)
            .map(|_| {
                let s = rng.gen_range(0..20u8);
                (s, rng.gen_range(s + 1..=24))
            })
            .collect();
        let nat = (0..n).map(|_| rng.gen_bool(0.2)).collect();
        let crashed = (0..n).map(|_| rng.gen_bool(0.1)).collect();
        let now = rng.gen_range(40_000..120_000u64);
        let reliable: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..1.0)).collect();
        let mut observations: Vec<(u64, u32, u32, bool)> = (0..rng.gen_range(0..150))
            .filter_map(|_| {
                let o = rng.gen_range(0..n);
                let s = rng.gen_range(0..n);
                let t = rng.gen_range(0..=now);
                let ok = rng.gen_bool(reliable[s as usize]);
                (o != s).then_some((t, o, s, ok))
            })
            .collect();
        observations.sort();
        Self {
            n,
            windows,
            nat,
            crashed,
            observations,
            now,
            thresholds: Thresholds {
                a_min: [0.1, 0.25, 0.4][rng.gen_range(0..3)],
                r_min: rng.gen_range(0.3..0.6),
            },
            rule: if rng.gen_bool(0.5) {
                ElectorateRule::Online
            } else {
                ElectorateRule::All
            },
            max_cluster: rng.gen_range(1..=7),
        }
    }

    pub fn roster(&self) -> Roster {
        let mut r = Roster::new(ReliabilityParams::default());
        for i in 0..self.n {
            let (s, e) = self.windows[i as usize];
            let w = AvailabilityWindow::hours(s, e).unwrap();
            r.insert(PeerProfile::new(NodeId(i), vec![w], Capacity::default(), self.nat[i as usize]).unwrap());
        }
        for &(t, o, s, ok) in &self.observations {
            r.observe(NodeId(o), NodeId(s), ok, SimTime(t)).unwrap();
        }
        for i in 0..self.n {
            if self.crashed[i as usize] {
                r.set_state(NodeId(i), PeerState::Offline);
            }
        }
        r
    }

    pub fn dvsp(&self) -> Dvsp {
        Dvsp::new(
            DvspConfig {
                thresholds: self.thresholds,
                max_cluster_size: self.max_cluster,
                electorate: self.rule,
                ..DvspConfig::default()
            },
            ClusterId(0),
        )
    }

    fn score(&self, outcomes: impl Iterator<Item = (u64, bool)>) -> f64 {
        let h = 21_600.0;
        let (mut num, mut den) = (0.5, 1.0);
        for (t, ok) in outcomes {
            let w = 0.5f64.powf((self.now - t) as f64 / h);
            den += w;
            if ok {
                num += w;
            }
        }
        num / den
    }

    pub fn merged_score(&self, p: u32) -> f64 {
        self.score(self.observations.iter().filter(|x| x.2 == p).map(|x| (x.0, x.3)))
    }

    pub fn local_score(&self, o: u32, p: u32) -> f64 {
        self.score(self.observations.iter().filter(|x| x.1 == o && x.2 == p).map(|x| (x.0, x.3)))
    }

    pub fn availability(&self, p: u32) -> f64 {
        let (s, e) = self.windows[p as usize];
        (0..24u8).filter(|h| *h >= s && *h < e).count() as f64 / 24.0
    }

    pub fn eligible(&self, p: u32) -> bool {
        !self.crashed[p as usize] && self.availability(p) >= self.thresholds.a_min && self.merged_score(p) >= self.thresholds.r_min
    }

    fn median_score(&self, p: u32) -> f64 {
        let observers: BTreeSet<u32> = self.observations.iter().filter(|x| x.2 == p).map(|x| x.1).collect();
        let mut v: Vec<f64> = observers.iter().map(|&o| self.local_score(o, p)).collect();
        if v.is_empty() {
            return 0.5;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m]
        } else {
            (v[m - 1] + v[m]) / 2.0
        }
    }

    pub fn electorate(&self) -> Vec<u32> {
        let hour = ((self.now / 3600) % 24) as u8;
        (0..self.n)
            .filter(|&p| {
                let (s, e) = self.windows[p as usize];
                !self.crashed[p as usize] && (self.rule == ElectorateRule::All || (hour >= s && hour < e))
            })
            .collect()
    }

    /// Expected winners, or `None` when nobody reaches a majority.
    pub fn expected(&self) -> Option<BTreeSet<NodeId>> {
        let mut cands: Vec<u32> = (0..self.n).filter(|&p| !self.nat[p as usize] && self.eligible(p)).collect();
        cands.sort_by(|&a, &b| {
            self.median_score(b)
                .total_cmp(&self.median_score(a))
                .then(self.availability(b).total_cmp(&self.availability(a)))
                .then(a.cmp(&b))
        });
        let voters = self.electorate();
        let winners: BTreeSet<NodeId> = cands
            .into_iter()
            .filter(|&c| {
                let yes = voters.iter().filter(|&&v| self.local_score(v, c) >= self.thresholds.r_min).count();
                2 * yes > voters.len()
            })
            .take(self.max_cluster)
            .map(NodeId)
            .collect();
        (!winners.is_empty()).then_some(winners)
    }
}

/// Strict majority and eligibility of every ELECT entry, recounted from the
/// ROUND and BALLOT entries alone. Returns the problems found.
pub fn recount(trace: &Trace, eligible: impl Fn(NodeId) -> bool) -> Vec<String> {
    let mut problems = Vec::new();
    let mut electorate: BTreeMap<u64, usize> = BTreeMap::new();
    let mut yes: BTreeMap<(u64, Option<NodeId>), BTreeSet<Option<NodeId>>> = BTreeMap::new();
    for e in trace.entries() {
        match e.event.as_str() {
            "ROUND" => {
                let n = e.field("electorate").map_or(0, |l| l.split(',').filter(|s| !s.is_empty()).count());
                electorate.insert(e.field_parse("round").unwrap(), n);
            }
            "BALLOT" if e.field("approve") == Some("1") => {
                let c = e.field_parse::<u32>("candidate").map(NodeId);
                yes.entry((e.field_parse("round").unwrap(), c)).or_default().insert(e.node);
            }
            "ELECT" => {
                let r: u64 = e.field_parse("round").unwrap();
                let n = electorate[&r];
                let y = yes.get(&(r, e.node)).map_or(0, BTreeSet::len);
                if 2 * y <= n {
                    problems.push(format!("round {r}: {:?} has {y}/{n}", e.node));
                }
                if !eligible(e.node.unwrap()) {
                    problems.push(format!("round {r}: {:?} not eligible", e.node));
                }
            }
            _ => {}
        }
    }
    problems
}

/// Runs one seeded election and checks it against the oracle and the
/// recount. `Ok(true)` when somebody was elected.
pub fn check_election(seed: u64) -> Result<bool, String> {
    let case = ElectionCase::random(seed);
    let mut roster = case.roster();
    let mut dvsp = case.dvsp();
    let mut trace = Trace::new();
    let got = dvsp
        .elect(&mut roster, SimTime(case.now), &mut trace)
        .ok()
        .map(|_| dvsp.cluster.members.clone());
    let want = case.expected();
    if got != want {
        return Err(format!("seed {seed}: elected {got:?}, oracle {want:?}"));
    }
    let problems = recount(&trace, |m| case.eligible(m.0));
    if !problems.is_empty() {
        return Err(format!("seed {seed}: {}", problems.join("; ")));
    }
    Ok(got.is_some())
}
