//! Metric extraction from a finished run, CSV/JSON rendering and
//! side-by-side comparison of two runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use super::world::RunOutput;
use crate::transactions::TxnId;

pub const METRIC_NAMES: [&str; 13] = [
    "request_success_rate",
    "availability_fraction_over_time",
    "coverage",
    "election_count",
    "demotion_count",
    "txn_commit_rate",
    "atomicity_violations",
    "messages_sent",
    "seed_upload_count",
    "mean_request_latency",
    "provisioning_success_rate",
    "clustering_coefficient",
    "characteristic_path_length",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub window_start: u64,
    pub window_end: u64,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// `[start, end)` windows covering `[0, duration)`.
pub fn windows(duration: u64, width: u64) -> Vec<(u64, u64)> {
    let width = width.max(1);
    (0..duration.div_ceil(width))
        .map(|k| (k * width, ((k + 1) * width).min(duration)))
        .collect()
}

impl MetricsReport {
    pub fn from_run(out: &RunOutput) -> Self {
        let c = &out.scenario.config;
        let duration = c.duration;
        let wins = windows(duration, c.metrics_window);
        let in_win = |t: u64, (a, b): (u64, u64)| t >= a && t < b;
        let mut rows = Vec::new();
        let mut push = |metric: &str, (a, b): (u64, u64), value: f64| {
            rows.push(MetricRow {
                metric: metric.to_string(),
                window_start: a,
                window_end: b,
                value,
            })
        };
        if duration == 0 {
            return Self::default();
        }
        let whole = (0, duration);
        let trace = &out.trace;

        let reqs: Vec<(u64, bool)> = trace
            .with_tag("REQ")
            .filter_map(|e| Some((e.field_parse::<u64>("issued")?, e.field("ok")? == "1")))
            .collect();
        for &w in &wins {
            let here: Vec<bool> = reqs.iter().filter(|(t, _)| in_win(*t, w)).map(|(_, ok)| *ok).collect();
            if !here.is_empty() {
                push(
                    "request_success_rate",
                    w,
                    here.iter().filter(|ok| **ok).count() as f64 / here.len() as f64,
                );
            }
        }

        let series = |f: &dyn Fn(&super::world::Sample) -> f64, w: (u64, u64)| {
            let xs: Vec<f64> = out.samples.iter().filter(|s| in_win(s.at, w)).map(f).collect();
            mean(&xs)
        };
        for &w in &wins {
            if let Some(v) = series(&|s| s.online_fraction, w) {
                push("availability_fraction_over_time", w, v);
            }
        }
        for &w in &wins {
            if let Some(v) = series(&|s| s.coverage, w) {
                push("coverage", w, v);
            }
        }
        for &w in &wins {
            let rounds: BTreeSet<u64> = trace
                .with_tag("ELECT")
                .filter(|e| in_win(e.tick.ticks(), w))
                .filter_map(|e| e.field_parse("round"))
                .collect();
            push("election_count", w, rounds.len() as f64);
        }
        for &w in &wins {
            let n = trace.with_tag("DEMOTE").filter(|e| in_win(e.tick.ticks(), w)).count();
            push("demotion_count", w, n as f64);
        }

        let mut verdicts: BTreeMap<TxnId, (u64, bool)> = BTreeMap::new();
        for e in trace.with_tag("DECIDE") {
            if let Some(t) = e.field_parse::<TxnId>("txn") {
                verdicts.entry(t).or_insert((e.tick.ticks(), e.field("verdict") == Some("commit")));
            }
        }
        for &w in &wins {
            let here: Vec<bool> = verdicts.values().filter(|(t, _)| in_win(*t, w)).map(|(_, c)| *c).collect();
            if !here.is_empty() {
                push("txn_commit_rate", w, here.iter().filter(|c| **c).count() as f64 / here.len() as f64);
            }
        }

        let violations = out.audit.atomicity_violations.len() + trace.count_tag("VIOLATION");
        push("atomicity_violations", whole, violations as f64);
        push("messages_sent", whole, out.stats.messages_sent as f64);
        let seeds = trace.with_tag("UPLOAD").filter(|e| e.field("seed") == Some("1")).count();
        push("seed_upload_count", whole, seeds as f64);
        if let Some(v) = crate::services::mean_request_latency(trace) {
            push("mean_request_latency", whole, v);
        }
        for &w in &wins {
            if let Some(v) = series(&|s| s.provisioning, w) {
                push("provisioning_success_rate", w, v);
            }
        }
        push("clustering_coefficient", whole, out.topology.clustering_coefficient());
        push("characteristic_path_length", whole, out.topology.characteristic_path_length());

        let selected = &c.metrics;
        if !selected.is_empty() {
            rows.retain(|r| selected.contains(&r.metric));
        }
        Self { rows }
    }

    pub fn series(&self, metric: &str) -> impl Iterator<Item = &MetricRow> + '_ {
        let metric = metric.to_string();
        self.rows.iter().filter(move |r| r.metric == metric)
    }

    /// First row of a metric; whole-run metrics have exactly one.
    pub fn value(&self, metric: &str) -> Option<f64> {
        self.series(metric).next().map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,window_start,window_end,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.6}", r.metric, r.window_start, r.window_end, r.value);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rows serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub window_start: u64,
    pub window_end: u64,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b - a` when both sides have a value.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    /// Aligns rows on `(metric, window)`; `metrics` empty keeps all.
    pub fn between(a: &MetricsReport, b: &MetricsReport, metrics: &[String]) -> Self {
        let key = |r: &MetricRow| (r.metric.clone(), r.window_start, r.window_end);
        let am: BTreeMap<_, f64> = a.rows.iter().map(|r| (key(r), r.value)).collect();
        let bm: BTreeMap<_, f64> = b.rows.iter().map(|r| (key(r), r.value)).collect();
        let mut order: Vec<(String, u64, u64)> = Vec::new();
        for r in a.rows.iter().chain(&b.rows) {
            let k = key(r);
            if !order.contains(&k) && (metrics.is_empty() || metrics.contains(&k.0)) {
                order.push(k);
            }
        }
        let rows = order
            .into_iter()
            .map(|k| {
                let (va, vb) = (am.get(&k).copied(), bm.get(&k).copied());
                ComparisonRow {
                    metric: k.0,
                    window_start: k.1,
                    window_end: k.2,
                    a: va,
                    b: vb,
                    delta: va.zip(vb).map(|(x, y)| y - x),
                }
            })
            .collect();
        Self { rows }
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("metric,window_start,window_end,a,b,delta\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.metric,
                r.window_start,
                r.window_end,
                f(r.a),
                f(r.b),
                f(r.delta)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rows serialize")
    }
}
