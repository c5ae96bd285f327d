//! Scenario files, the simulated world that runs them, metric extraction
//! and offline trace verification.

pub mod metrics;
pub mod presets;
pub mod scenario;
pub mod verify;
pub mod world;

pub use metrics::{Comparison, MetricRow, MetricsReport, METRIC_NAMES};
pub use scenario::{
    Coordination, FaultEntry, IdentityMode, PeerSpec, PlacementMode, Scenario, ScenarioConfig, ScenarioError, ServiceSpec, StepSpec, TrustSpec,
    WorkflowSpec,
};
pub use verify::{verify, verify_text, VerifyReport};
pub use world::{RunOutput, Sample, WorldMsg};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("scenarios differ in {0}; compare needs equal duration and seed")]
    IncomparableScenarios(&'static str),
}

/// Runs a validated scenario.
pub fn run(scenario: &Scenario) -> Result<(RunOutput, MetricsReport), HarnessError> {
    scenario.validate()?;
    let out = world::run(scenario);
    let report = MetricsReport::from_run(&out);
    Ok((out, report))
}

/// Runs both scenarios, in parallel, and lines their metrics up.
pub fn compare(a: &Scenario, b: &Scenario, metrics: &[String]) -> Result<Comparison, HarnessError> {
    if a.config.duration != b.config.duration {
        return Err(HarnessError::IncomparableScenarios("duration"));
    }
    if a.config.seed != b.config.seed {
        return Err(HarnessError::IncomparableScenarios("seed"));
    }
    let (ra, rb) = std::thread::scope(|s| {
        let ha = s.spawn(|| run(a));
        let rb = run(b);
        (ha.join().expect("run thread"), rb)
    });
    Ok(Comparison::between(&ra?.1, &rb?.1, metrics))
}

/// The effective configuration as `# `-prefixed lines.
pub fn config_header(scenario: &Scenario) -> String {
    scenario.write().lines().map(|l| format!("# {l}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Scenario {
        let mut sc = presets::spof_dvsp();
        sc.config.duration = 4 * 3_600;
        sc.faults.clear();
        sc
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, ra) = run(&small()).unwrap();
        let (b, rb) = run(&small()).unwrap();
        assert_eq!(a.trace.digest(), b.trace.digest());
        assert_eq!(ra.to_csv(), rb.to_csv());
        assert!(a.trace.count_tag("REQ") > 0);
    }

    #[test]
    fn zero_duration_gives_header_only() {
        let mut sc = small();
        sc.config.duration = 0;
        let (_, r) = run(&sc).unwrap();
        assert_eq!(r.to_csv(), "metric,window_start,window_end,value\n");
    }

    #[test]
    fn compare_needs_equal_duration() {
        let a = small();
        let mut b = small();
        b.config.duration += 1;
        assert_eq!(compare(&a, &b, &[]), Err(HarnessError::IncomparableScenarios("duration")));
        let c = compare(&a, &a, &[]).unwrap();
        assert!(c.rows.iter().all(|r| r.delta.is_none_or(|d| d == 0.0)));
    }

    #[test]
    fn world_traces_pass_verification() {
        let (out, _) = run(&small()).unwrap();
        let r = verify_text(&out.trace.export());
        assert!(r.ok(), "{:?}", r.failures);
    }

    #[test]
    fn nat_prober_waits_for_relayed_ack() {
        let text = "[config]\nduration=36000\nmax_cluster=3\nr_min=0.5\n[peers]\npeer 0\npeer 1 windows=8-16\npeer 2 nat=1\n";
        let sc = Scenario::parse(text).unwrap();
        let (out, _) = run(&sc).unwrap();
        assert_eq!(out.trace.count_tag("DEMOTE"), 0);
        assert_eq!(out.members, [0, 1].map(crate::simnet::NodeId).into());
        let mut rounds = std::collections::BTreeMap::new();
        for e in out.trace.with_tag("ROUND") {
            *rounds.entry(e.tick).or_insert(0) += 1;
        }
        assert!(rounds.values().all(|&n| n == 1), "{rounds:?}");
    }
}
