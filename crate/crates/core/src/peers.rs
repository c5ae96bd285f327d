//! Peer lifecycle: availability schedules, capacities, reliability history
//! and super-peer eligibility.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::simnet::{NodeId, SimTime};

pub const HISTORY_CAPACITY: usize = 256;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum PeerError {
    #[error("invalid availability window {start}..{end} (wraps={wraps})")]
    BadWindow { start: u8, end: u8, wraps: bool },
    #[error("availability windows overlap at hour {0}")]
    OverlappingWindows(u8),
    #[error("outcome at {at} precedes last recorded outcome at {last}")]
    NonMonotonicTime { at: SimTime, last: SimTime },
    #[error("upload_slots must be positive")]
    NoUploadSlots,
}

/// Hours `[start_hour, end_hour)` of each simulated day. A wrapping window
/// crosses midnight: `[22, 4)` covers 22, 23, 0, 1, 2, 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AvailabilityWindow {
    start_hour: u8,
    end_hour: u8,
    wraps: bool,
}

impl AvailabilityWindow {
    pub fn new(start_hour: u8, end_hour: u8, wraps: bool) -> Result<Self, PeerError> {
        let bad = PeerError::BadWindow {
            start: start_hour,
            end: end_hour,
            wraps,
        };
        if start_hour >= 24 || end_hour == 0 || end_hour > 24 {
            return Err(bad);
        }
        if wraps {
            // A wrapping window ending at 24 is not wrapping; start == end would be the full day.
            if end_hour >= start_hour || end_hour == 24 {
                return Err(bad);
            }
        } else if start_hour >= end_hour {
            return Err(bad);
        }
        Ok(Self { start_hour, end_hour, wraps })
    }

    /// Non-wrapping `[start, end)`.
    pub fn hours(start_hour: u8, end_hour: u8) -> Result<Self, PeerError> {
        Self::new(start_hour, end_hour, false)
    }

    pub fn always() -> Self {
        Self {
            start_hour: 0,
            end_hour: 24,
            wraps: false,
        }
    }

    pub fn start_hour(&self) -> u8 {
        self.start_hour
    }

    pub fn end_hour(&self) -> u8 {
        self.end_hour
    }

    pub fn wraps(&self) -> bool {
        self.wraps
    }

    pub fn covers(&self, hour: u8) -> bool {
        if self.wraps {
            hour >= self.start_hour || hour < self.end_hour
        } else {
            hour >= self.start_hour && hour < self.end_hour
        }
    }

    pub fn len_hours(&self) -> u32 {
        if self.wraps {
            u32::from(24 - self.start_hour + self.end_hour)
        } else {
            u32::from(self.end_hour - self.start_hour)
        }
    }
}

impl fmt::Display for AvailabilityWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.wraps {
            write!(f, "{}-{}w", self.start_hour, self.end_hour)
        } else {
            write!(f, "{}-{}", self.start_hour, self.end_hour)
        }
    }
}

impl std::str::FromStr for AvailabilityWindow {
    type Err = PeerError;

    /// Parses the [`Display`](fmt::Display) form, e.g. `8-16` or `22-4w`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (body, wraps) = match s.strip_suffix('w') {
            Some(b) => (b, true),
            None => (s, false),
        };
        let bad = PeerError::BadWindow { start: 0, end: 0, wraps };
        let (a, b) = body.split_once('-').ok_or(bad.clone())?;
        let start = a.parse().map_err(|_| bad.clone())?;
        let end = b.parse().map_err(|_| bad)?;
        Self::new(start, end, wraps)
    }
}

/// Rejects windows that share an hour.
pub fn validate_windows(windows: &[AvailabilityWindow]) -> Result<(), PeerError> {
    for hour in 0..24u8 {
        if windows.iter().filter(|w| w.covers(hour)).count() > 1 {
            return Err(PeerError::OverlappingWindows(hour));
        }
    }
    Ok(())
}

pub fn covered_hours(windows: &[AvailabilityWindow]) -> u32 {
    (0..24u8).filter(|&h| windows.iter().any(|w| w.covers(h))).count() as u32
}

/// Fraction of the day covered by the windows.
pub fn availability_fraction(windows: &[AvailabilityWindow]) -> f64 {
    f64::from(covered_hours(windows)) / 24.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capacity {
    pub storage_units: u32,
    pub compute_units: u32,
    pub upload_slots: u32,
}

impl Default for Capacity {
    fn default() -> Self {
        Self {
            storage_units: 10,
            compute_units: 1,
            upload_slots: 1,
        }
    }
}

impl Capacity {
    pub fn validate(&self) -> Result<(), PeerError> {
        if self.upload_slots == 0 {
            return Err(PeerError::NoUploadSlots);
        }
        Ok(())
    }
}

/// Decay parameters for [`ReliabilityHistory::score`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityParams {
    /// Ticks after which an outcome's weight halves.
    pub half_life: u64,
    /// Weight of the neutral 0.5 prior.
    pub prior_weight: f64,
}

impl Default for ReliabilityParams {
    fn default() -> Self {
        Self {
            half_life: 21_600,
            prior_weight: 1.0,
        }
    }
}

/// Bounded log of interaction outcomes, oldest evicted first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReliabilityHistory {
    outcomes: VecDeque<(SimTime, bool)>,
}

impl ReliabilityHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn outcomes(&self) -> impl Iterator<Item = (SimTime, bool)> + '_ {
        self.outcomes.iter().copied()
    }

    pub fn last_time(&self) -> Option<SimTime> {
        self.outcomes.back().map(|(t, _)| *t)
    }

    pub fn record_outcome(&mut self, success: bool, at: SimTime) -> Result<(), PeerError> {
        if let Some(last) = self.last_time() {
            if at < last {
                return Err(PeerError::NonMonotonicTime { at, last });
            }
        }
        if self.outcomes.len() == HISTORY_CAPACITY {
            self.outcomes.pop_front();
        }
        self.outcomes.push_back((at, success));
        Ok(())
    }

    /// Exponentially decayed success ratio blended with a 0.5 prior:
    /// `(Σ wᵢ·sᵢ + W₀/2) / (Σ wᵢ + W₀)` with `wᵢ = 0.5^((now − tᵢ)/H)`.
    pub fn score(&self, now: SimTime, params: &ReliabilityParams) -> f64 {
        let h = params.half_life.max(1) as f64;
        let (mut num, mut den) = (0.5 * params.prior_weight, params.prior_weight);
        for (t, ok) in &self.outcomes {
            let w = 0.5f64.powf(now.since(*t) as f64 / h);
            den += w;
            if *ok {
                num += w;
            }
        }
        if den == 0.0 {
            0.5
        } else {
            (num / den).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub a_min: f64,
    pub r_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { a_min: 0.25, r_min: 0.6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClusterId(pub u32);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// `Offline` means crashed. Scheduled absence outside availability windows
/// is not a state change; see [`PeerProfile::is_scheduled`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeerState {
    Regular,
    SuperPeerMember(ClusterId),
    Offline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeerProfile {
    pub id: NodeId,
    pub windows: Vec<AvailabilityWindow>,
    pub capacity: Capacity,
    /// All outcomes observed about this peer, merged across observers.
    pub history: ReliabilityHistory,
    pub state: PeerState,
    pub nat: bool,
}

impl PeerProfile {
    pub fn new(id: NodeId, windows: Vec<AvailabilityWindow>, capacity: Capacity, nat: bool) -> Result<Self, PeerError> {
        validate_windows(&windows)?;
        capacity.validate()?;
        Ok(Self {
            id,
            windows,
            capacity,
            history: ReliabilityHistory::new(),
            state: PeerState::Regular,
            nat,
        })
    }

    pub fn availability(&self) -> f64 {
        availability_fraction(&self.windows)
    }

    pub fn is_scheduled(&self, now: SimTime) -> bool {
        let h = now.hour_of_day();
        self.windows.iter().any(|w| w.covers(h))
    }

    pub fn is_online(&self, now: SimTime) -> bool {
        self.state != PeerState::Offline && self.is_scheduled(now)
    }

    pub fn is_member(&self) -> bool {
        matches!(self.state, PeerState::SuperPeerMember(_))
    }
}

/// Inclusive thresholds on availability and the peer's merged reliability.
pub fn eligibility(profile: &PeerProfile, now: SimTime, thresholds: &Thresholds, params: &ReliabilityParams) -> bool {
    profile.state != PeerState::Offline && profile.availability() >= thresholds.a_min && profile.history.score(now, params) >= thresholds.r_min
}

/// All peers of one simulation plus each observer's private view of the
/// others' reliability.
#[derive(Debug, Clone, Default)]
pub struct Roster {
    profiles: BTreeMap<NodeId, PeerProfile>,
    observations: BTreeMap<(NodeId, NodeId), ReliabilityHistory>,
    pub params: ReliabilityParams,
}

impl Roster {
    pub fn new(params: ReliabilityParams) -> Self {
        Self { params, ..Self::default() }
    }

    pub fn insert(&mut self, profile: PeerProfile) {
        self.profiles.insert(profile.id, profile);
    }

    pub fn get(&self, id: NodeId) -> Option<&PeerProfile> {
        self.profiles.get(&id)
    }

    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut PeerProfile> {
        self.profiles.get_mut(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.profiles.keys().copied()
    }

    pub fn profiles(&self) -> impl Iterator<Item = &PeerProfile> {
        self.profiles.values()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn online(&self, now: SimTime) -> impl Iterator<Item = NodeId> + '_ {
        self.profiles.values().filter(move |p| p.is_online(now)).map(|p| p.id)
    }

    pub fn set_state(&mut self, id: NodeId, state: PeerState) {
        if let Some(p) = self.profiles.get_mut(&id) {
            p.state = state;
        }
    }

    /// Records what `observer` saw when interacting with `subject`.
    pub fn observe(&mut self, observer: NodeId, subject: NodeId, success: bool, at: SimTime) -> Result<(), PeerError> {
        self.observations.entry((observer, subject)).or_default().record_outcome(success, at)?;
        if let Some(p) = self.profiles.get_mut(&subject) {
            p.history.record_outcome(success, at)?;
        }
        Ok(())
    }

    pub fn observation(&self, observer: NodeId, subject: NodeId) -> Option<&ReliabilityHistory> {
        self.observations.get(&(observer, subject))
    }

    /// `observer`'s local score of `subject`; the prior when it has no history.
    pub fn local_score(&self, observer: NodeId, subject: NodeId, now: SimTime) -> f64 {
        self.observation(observer, subject)
            .map(|h| h.score(now, &self.params))
            .unwrap_or_else(|| ReliabilityHistory::new().score(now, &self.params))
    }

    /// Median of the observers' local scores of `subject`, or the prior
    /// when nobody has observed it.
    pub fn median_observer_score(&self, subject: NodeId, now: SimTime) -> f64 {
        let mut scores: Vec<f64> = self
            .observations
            .iter()
            .filter(|((_, s), _)| *s == subject)
            .map(|(_, h)| h.score(now, &self.params))
            .collect();
        if scores.is_empty() {
            return ReliabilityHistory::new().score(now, &self.params);
        }
        scores.sort_by(f64::total_cmp);
        let m = scores.len() / 2;
        if scores.len() % 2 == 1 {
            scores[m]
        } else {
            (scores[m - 1] + scores[m]) / 2.0
        }
    }

    pub fn is_eligible(&self, id: NodeId, now: SimTime, thresholds: &Thresholds) -> bool {
        self.get(id).is_some_and(|p| eligibility(p, now, thresholds, &self.params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: u8, e: u8) -> AvailabilityWindow {
        AvailabilityWindow::hours(s, e).unwrap()
    }

    #[test]
    fn window_text_round_trip() {
        for win in [w(0, 8), w(3, 24), AvailabilityWindow::new(22, 4, true).unwrap()] {
            assert_eq!(win.to_string().parse::<AvailabilityWindow>().unwrap(), win);
        }
        assert!("8-8".parse::<AvailabilityWindow>().is_err());
        assert!("x".parse::<AvailabilityWindow>().is_err());
    }

    #[test]
    fn fractions() {
        assert_eq!(availability_fraction(&[w(0, 8)]), 1.0 / 3.0);
        assert_eq!(availability_fraction(&[]), 0.0);
        assert_eq!(availability_fraction(&[w(0, 24)]), 1.0);
    }

    #[test]
    fn wrapping_window_matches_slot_enumeration() {
        let win = AvailabilityWindow::new(22, 4, true).unwrap();
        let slots = (0..24u8).filter(|h| [22, 23, 0, 1, 2, 3].contains(h)).count();
        assert_eq!(slots, 6);
        assert_eq!(availability_fraction(&[win]), slots as f64 / 24.0);
        assert_eq!(win.len_hours(), 6);
    }

    #[test]
    fn window_validation() {
        assert!(AvailabilityWindow::hours(8, 8).is_err());
        assert!(AvailabilityWindow::hours(24, 24).is_err());
        assert!(AvailabilityWindow::new(4, 22, true).is_err());
        assert_eq!(validate_windows(&[w(0, 8), w(7, 9)]), Err(PeerError::OverlappingWindows(7)));
        assert!(validate_windows(&[w(0, 8), w(8, 9)]).is_ok());
    }

    #[test]
    fn history_bound_and_order() {
        let mut h = ReliabilityHistory::new();
        h.record_outcome(true, SimTime(0)).unwrap();
        assert_eq!(h.len(), 1);
        for t in 1..=256 {
            h.record_outcome(false, SimTime(t)).unwrap();
        }
        assert_eq!(h.len(), 256);
        assert_eq!(h.outcomes().next().unwrap(), (SimTime(1), false));
        assert_eq!(
            h.record_outcome(true, SimTime(5)),
            Err(PeerError::NonMonotonicTime {
                at: SimTime(5),
                last: SimTime(256)
            })
        );
    }

    /// Direct evaluation of the decayed estimator, written independently.
    fn oracle(outcomes: &[(u64, bool)], now: u64) -> f64 {
        let mut s = 0.5;
        let mut d = 1.0;
        for &(t, ok) in outcomes {
            let w = (-(std::f64::consts::LN_2) * (now - t) as f64 / 21_600.0).exp();
            d += w;
            s += if ok { w } else { 0.0 };
        }
        s / d
    }

    #[test]
    fn score_examples() {
        let p = ReliabilityParams::default();
        let mut h = ReliabilityHistory::new();
        assert_eq!(h.score(SimTime(0), &p), 0.5);
        for _ in 0..3 {
            h.record_outcome(true, SimTime(100)).unwrap();
        }
        assert!((h.score(SimTime(100), &p) - 0.875).abs() < 1e-12);
        assert!((oracle(&[(100, true); 3], 100) - 0.875).abs() < 1e-12);

        let mut f = ReliabilityHistory::new();
        for _ in 0..10 {
            f.record_outcome(false, SimTime(0)).unwrap();
        }
        assert!((f.score(SimTime(0), &p) - 0.5 / 11.0).abs() < 1e-12);
        assert!((f.score(SimTime(0), &p) - 0.045_45).abs() < 1e-5);
    }

    #[test]
    fn recency_dominates() {
        let p = ReliabilityParams::default();
        let mut h = ReliabilityHistory::new();
        for _ in 0..5 {
            h.record_outcome(false, SimTime(0)).unwrap();
        }
        let now = SimTime(10 * 21_600 + 1);
        h.record_outcome(true, now).unwrap();
        // One fresh success against a unit-weight prior caps at 1.5 / 2.
        let mut fresh = ReliabilityHistory::new();
        fresh.record_outcome(true, now).unwrap();
        assert!((fresh.score(now, &p) - 0.75).abs() < 1e-12);
        // Old failures are almost fully decayed away.
        assert!((h.score(now, &p) - 0.75).abs() < 0.005);
    }

    #[test]
    fn eligibility_thresholds() {
        let p = ReliabilityParams::default();
        let mut peer = PeerProfile::new(NodeId(1), vec![w(0, 8)], Capacity::default(), false).unwrap();
        let th = Thresholds { a_min: 0.3, r_min: 0.5 };
        assert!(eligibility(&peer, SimTime(0), &th, &p));
        let exact = Thresholds {
            a_min: 1.0 / 3.0,
            r_min: 0.5,
        };
        assert!(eligibility(&peer, SimTime(0), &exact, &p));
        peer.state = PeerState::Offline;
        assert!(!eligibility(&peer, SimTime(0), &Thresholds { a_min: 0.0, r_min: 0.0 }, &p));
    }

    #[test]
    fn median_observer_score_even_and_empty() {
        let mut r = Roster::new(ReliabilityParams::default());
        for i in 0..3 {
            r.insert(PeerProfile::new(NodeId(i), vec![AvailabilityWindow::always()], Capacity::default(), false).unwrap());
        }
        assert_eq!(r.median_observer_score(NodeId(0), SimTime(0)), 0.5);
        r.observe(NodeId(1), NodeId(0), true, SimTime(0)).unwrap();
        r.observe(NodeId(2), NodeId(0), false, SimTime(0)).unwrap();
        // (1.5/2 + 0.5/2) / 2
        assert!((r.median_observer_score(NodeId(0), SimTime(0)) - 0.5).abs() < 1e-12);
        assert_eq!(r.get(NodeId(0)).unwrap().history.len(), 2);
    }

    fn history_strategy() -> impl Strategy<Value = Vec<(u64, bool)>> {
        prop::collection::vec((0u64..200_000, any::<bool>()), 0..300).prop_map(|mut v| {
            v.sort_by_key(|x| x.0);
            v
        })
    }

    proptest! {
        #[test]
        fn score_in_unit_interval(outcomes in history_strategy(), extra in 0u64..100_000) {
            let mut h = ReliabilityHistory::new();
            for (t, ok) in &outcomes {
                h.record_outcome(*ok, SimTime(*t)).unwrap();
            }
            let now = SimTime(outcomes.last().map(|x| x.0).unwrap_or(0) + extra);
            let s = h.score(now, &ReliabilityParams::default());
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn appending_is_monotone(outcomes in prop::collection::vec((0u64..50_000, any::<bool>()), 0..200)) {
            let mut sorted = outcomes;
            sorted.sort_by_key(|x| x.0);
            let mut h = ReliabilityHistory::new();
            for (t, ok) in &sorted {
                h.record_outcome(*ok, SimTime(*t)).unwrap();
            }
            let now = SimTime(60_000);
            let p = ReliabilityParams::default();
            let base = h.score(now, &p);
            let mut up = h.clone();
            up.record_outcome(true, now).unwrap();
            let mut down = h.clone();
            down.record_outcome(false, now).unwrap();
            // Eviction at capacity can remove an old outcome, so only check below it.
            if h.len() < HISTORY_CAPACITY {
                prop_assert!(up.score(now, &p) >= base - 1e-12);
                prop_assert!(down.score(now, &p) <= base + 1e-12);
            }
        }

        #[test]
        fn fraction_is_order_invariant(starts in prop::collection::btree_set(0u8..24, 0..8), seed in any::<u64>()) {
            let starts: Vec<u8> = starts.into_iter().collect();
            let windows: Vec<AvailabilityWindow> = starts
                .iter()
                .map(|&s| AvailabilityWindow::hours(s, s + 1).unwrap())
                .collect();
            let mut shuffled = windows.clone();
            let k = (seed as usize) % (shuffled.len().max(1));
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(availability_fraction(&windows), availability_fraction(&shuffled));
        }
    }
}
