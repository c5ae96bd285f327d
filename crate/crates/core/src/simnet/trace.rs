//! Append-only execution trace with a running 64-bit digest.
//!
//! Every entry is rendered as `tick<TAB>node<TAB>event<TAB>detail`; the digest
//! is FNV-1a over exactly those rendered lines (newline-terminated), so the
//! exported file can be re-hashed offline and compared with its final line.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use super::{NodeId, SimTime};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a byte slice, continuing from `state`.
pub fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes.iter().fold(state, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// FNV-1a of a byte slice from the standard offset basis.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    fnv1a(FNV_OFFSET, bytes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub tick: SimTime,
    pub node: Option<NodeId>,
    pub event: String,
    pub detail: String,
}

impl TraceEntry {
    /// Looks up `key=value` in the detail field.
    pub fn field(&self, key: &str) -> Option<&str> {
        self.detail.split(' ').find_map(|tok| {
            let (k, v) = tok.split_once('=')?;
            (k == key).then_some(v)
        })
    }

    pub fn field_parse<T: FromStr>(&self, key: &str) -> Option<T> {
        self.field(key)?.parse().ok()
    }
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(n) => write!(f, "{}\t{}\t{}\t{}", self.tick.ticks(), n, self.event, self.detail),
            None => write!(f, "{}\t-\t{}\t{}", self.tick.ticks(), self.event, self.detail),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trace {
    entries: Vec<TraceEntry>,
    digest: u64,
}

impl Default for Trace {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            digest: FNV_OFFSET,
        }
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c }).collect()
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, tick: SimTime, node: Option<NodeId>, event: &str, detail: impl AsRef<str>) {
        let entry = TraceEntry {
            tick,
            node,
            event: sanitize(event),
            detail: sanitize(detail.as_ref()),
        };
        let mut line = entry.to_string();
        line.push('\n');
        self.digest = fnv1a(self.digest, line.as_bytes());
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn digest_hex(&self) -> String {
        format!("{:016x}", self.digest)
    }

    /// Entries carrying the given event tag.
    pub fn with_tag<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a TraceEntry> + 'a {
        self.entries.iter().filter(move |e| e.event == tag)
    }

    pub fn count_tag(&self, tag: &str) -> usize {
        self.with_tag(tag).count()
    }

    /// Newline-delimited export; the final line is the 16-hex-digit digest.
    pub fn export(&self) -> String {
        let mut out = String::with_capacity(self.entries.len() * 40);
        for e in &self.entries {
            let _ = writeln!(out, "{e}");
        }
        let _ = writeln!(out, "{}", self.digest_hex());
        out
    }

    /// Parses an exported trace. Returns the trace and the digest claimed on
    /// the final line; the caller compares it against `Trace::digest`.
    pub fn parse(text: &str) -> Result<(Trace, u64), TraceParseError> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        let (last, body) = lines.split_last().ok_or(TraceParseError::Empty)?;
        let claimed = u64::from_str_radix(last.trim(), 16).map_err(|_| TraceParseError::BadDigest(last.to_string()))?;
        let mut trace = Trace::new();
        for (i, line) in body.iter().enumerate() {
            let bad = || TraceParseError::BadLine(i + 1);
            let mut parts = line.splitn(4, '\t');
            let tick: u64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let node = match parts.next().ok_or_else(bad)? {
                "-" => None,
                n => Some(NodeId(n.parse().map_err(|_| bad())?)),
            };
            let event = parts.next().ok_or_else(bad)?;
            let detail = parts.next().unwrap_or("");
            trace.record(SimTime(tick), node, event, detail);
        }
        Ok((trace, claimed))
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TraceParseError {
    #[error("empty trace file")]
    Empty,
    #[error("malformed digest line: {0}")]
    BadDigest(String),
    #[error("malformed trace record on line {0}")]
    BadLine(usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_parse_preserves_digest() {
        let mut t = Trace::new();
        t.record(SimTime(0), None, "BEGIN", "seed=1");
        t.record(SimTime(5), Some(NodeId(3)), "SEND", "id=0 dst=4 kind=ping");
        let text = t.export();
        assert_eq!(text.lines().last().unwrap().len(), 16);
        let (back, claimed) = Trace::parse(&text).unwrap();
        assert_eq!(claimed, t.digest());
        assert_eq!(back.digest(), t.digest());
        assert_eq!(back.entries(), t.entries());
    }

    #[test]
    fn tabs_in_detail_do_not_break_format() {
        let mut t = Trace::new();
        t.record(SimTime(1), None, "X", "a\tb");
        let (back, _) = Trace::parse(&t.export()).unwrap();
        assert_eq!(back.entries()[0].detail, "a b");
    }

    #[test]
    fn field_lookup() {
        let mut t = Trace::new();
        t.record(SimTime(1), None, "X", "txn=7 verdict=commit");
        assert_eq!(t.entries()[0].field("verdict"), Some("commit"));
        assert_eq!(t.entries()[0].field_parse::<u64>("txn"), Some(7));
        assert_eq!(t.entries()[0].field("nope"), None);
    }
}
