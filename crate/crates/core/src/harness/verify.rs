//! Offline re-checking of an exported trace.

use std::collections::{BTreeMap, BTreeSet};

use crate::simnet::{NodeId, Trace};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerifyReport {
    pub entries: usize,
    pub failures: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Parses `text` and runs every check; unparseable input is one failure.
pub fn verify_text(text: &str) -> VerifyReport {
    match Trace::parse(text) {
        Ok((trace, claimed)) => {
            let mut r = verify(&trace);
            if trace.digest() != claimed {
                r.failures.insert(
                    0,
                    format!("digest mismatch: file claims {claimed:016x}, records hash to {}", trace.digest_hex()),
                );
            }
            r
        }
        Err(e) => VerifyReport {
            entries: 0,
            failures: vec![e.to_string()],
        },
    }
}

fn nodes(list: &str) -> BTreeSet<NodeId> {
    list.split(',').filter_map(|s| s.parse().ok().map(NodeId)).collect()
}

/// Trace-level invariants: monotone ticks, one verdict per transaction,
/// strict-majority and eligible elections recounted from ballots, no
/// recorded protocol violation, no sealed content released to a non-owner.
pub fn verify(trace: &Trace) -> VerifyReport {
    let mut failures = Vec::new();
    let entries = trace.entries();
    for w in entries.windows(2) {
        if w[1].tick < w[0].tick {
            failures.push(format!("tick goes backwards: {} after {}", w[1].tick, w[0].tick));
            break;
        }
    }

    let mut verdicts: BTreeMap<u64, &str> = BTreeMap::new();
    for e in trace.with_tag("DECIDE") {
        let (Some(txn), Some(v)) = (e.field_parse::<u64>("txn"), e.field("verdict")) else {
            failures.push(format!("malformed DECIDE: {}", e.detail));
            continue;
        };
        match verdicts.insert(txn, v) {
            Some(prev) if prev != v => failures.push(format!("txn {txn} decided both {prev} and {v}")),
            _ => {}
        }
    }

    let mut electorates: BTreeMap<u64, BTreeSet<NodeId>> = BTreeMap::new();
    let mut approvals: BTreeMap<(u64, NodeId), BTreeSet<NodeId>> = BTreeMap::new();
    for e in entries {
        match e.event.as_str() {
            "ROUND" => {
                if let (Some(r), Some(list)) = (e.field_parse::<u64>("round"), e.field("electorate")) {
                    electorates.insert(r, nodes(list));
                }
            }
            "BALLOT" => {
                let (Some(r), Some(c), Some(voter)) = (e.field_parse::<u64>("round"), e.field_parse::<u32>("candidate"), e.node) else {
                    continue;
                };
                let in_electorate = electorates.get(&r).is_some_and(|s| s.contains(&voter));
                if e.field("approve") == Some("1") && in_electorate {
                    approvals.entry((r, NodeId(c))).or_default().insert(voter);
                }
            }
            "ELECT" => {
                let (Some(r), Some(m)) = (e.field_parse::<u64>("round"), e.node) else {
                    failures.push(format!("malformed ELECT: {}", e.detail));
                    continue;
                };
                let n = electorates.get(&r).map_or(0, BTreeSet::len);
                let yes = approvals.get(&(r, m)).map_or(0, BTreeSet::len);
                if 2 * yes <= n {
                    failures.push(format!("round {r}: {m} elected with {yes} of {n} approvals"));
                }
                if e.field_parse::<usize>("approvals") != Some(yes) {
                    failures.push(format!("round {r}: {m} claims {:?} approvals, ballots show {yes}", e.field("approvals")));
                }
                if e.field("eligible") != Some("1") {
                    failures.push(format!("round {r}: {m} was not eligible"));
                }
            }
            "VIOLATION" => failures.push(format!("recorded violation at {}: {}", e.tick, e.detail)),
            "FETCH" if e.field("content") == Some("1") => {
                let owner = e.field_parse::<u32>("owner").map(NodeId);
                let to = e.field_parse::<u32>("to").map(NodeId);
                if owner.is_some() && to != owner && e.node != owner {
                    failures.push(format!("sealed chunk released at {}: {}", e.tick, e.detail));
                }
            }
            _ => {}
        }
    }
    VerifyReport {
        entries: entries.len(),
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::SimTime;

    #[test]
    fn detects_minority_election_and_tampering() {
        let mut t = Trace::new();
        t.record(SimTime(0), None, "ROUND", "round=0 electorate=0,1,2 candidates=1");
        t.record(SimTime(0), Some(NodeId(0)), "BALLOT", "round=0 candidate=1 approve=1 basis=0.5");
        t.record(SimTime(0), Some(NodeId(1)), "BALLOT", "round=0 candidate=1 approve=0 basis=0.4");
        t.record(SimTime(0), Some(NodeId(1)), "ELECT", "round=0 approvals=1 electorate=3 eligible=1");
        let r = verify(&t);
        assert_eq!(r.failures.len(), 1, "{:?}", r.failures);

        let text = t.export().replace("approve=0", "approve=1").replace("approvals=1", "approvals=2");
        let r = verify_text(&text);
        assert!(r.failures[0].starts_with("digest mismatch"));
        assert_eq!(r.failures.len(), 1);
    }

    #[test]
    fn detects_conflicting_verdicts_and_leaks() {
        let mut t = Trace::new();
        t.record(SimTime(1), None, "DECIDE", "txn=4 verdict=commit");
        t.record(SimTime(2), None, "DECIDE", "txn=4 verdict=abort");
        t.record(SimTime(3), Some(NodeId(2)), "FETCH", "owner=1 chunk=0 to=3 content=1");
        t.record(SimTime(3), Some(NodeId(2)), "FETCH", "owner=1 chunk=0 to=1 content=1");
        assert_eq!(verify(&t).failures.len(), 2);
    }
}
