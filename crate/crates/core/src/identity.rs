//! Identity provisioning over a weighted trust graph.
//!
//! Three schemes are supported: a central authority (CIP), a trust-quorum
//! scheme where any sufficiently trusted peers can attest (DIP), and a
//! proportional-representation mix where listed principals provision
//! themselves and everyone else falls back to another scheme.
//!
//! Trust between two nodes is the best product of edge weights over simple
//! directed paths of bounded length. It is recomputed at every verification,
//! so lowering an attester's edge revokes the identities it vouched for.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::simnet::{NodeId, SimTime};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum IdentityError {
    #[error("node {0} cannot attest to itself")]
    SelfAttestation(NodeId),
    #[error("trust weight {0} outside [0,1]")]
    BadWeight(f64),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrustGraph {
    nodes: BTreeSet<NodeId>,
    edges: BTreeMap<NodeId, BTreeMap<NodeId, f64>>,
}

impl TrustGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_nodes(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            nodes: nodes.into_iter().collect(),
            edges: BTreeMap::new(),
        }
    }

    pub fn add_node(&mut self, n: NodeId) {
        self.nodes.insert(n);
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.nodes.contains(&n)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeMap::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = TrustEdge> + '_ {
        self.edges
            .iter()
            .flat_map(|(&from, out)| out.iter().map(move |(&to, &weight)| TrustEdge { from, to, weight }))
    }

    /// Direct edge weight; 0 when absent.
    pub fn weight(&self, from: NodeId, to: NodeId) -> f64 {
        self.edges.get(&from).and_then(|o| o.get(&to)).copied().unwrap_or(0.0)
    }

    pub fn out_edges(&self, from: NodeId) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.edges.get(&from).into_iter().flat_map(|o| o.iter().map(|(&t, &w)| (t, w)))
    }

    /// Upserts `attester → principal`. Endpoints join the node set.
    pub fn attest(&mut self, attester: NodeId, principal: NodeId, weight: f64) -> Result<(), IdentityError> {
        if attester == principal {
            return Err(IdentityError::SelfAttestation(attester));
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(IdentityError::BadWeight(weight));
        }
        self.nodes.insert(attester);
        self.nodes.insert(principal);
        self.edges.entry(attester).or_default().insert(principal, weight);
        Ok(())
    }

    pub fn remove_edge(&mut self, from: NodeId, to: NodeId) -> bool {
        self.edges.get_mut(&from).and_then(|o| o.remove(&to)).is_some()
    }

    /// Max over simple directed paths `a → b` with at most `max_depth` edges
    /// of the product of edge weights. 1 for `a == b`, 0 without a path.
    pub fn trust_path_score(&self, a: NodeId, b: NodeId, max_depth: usize) -> f64 {
        if a == b {
            return 1.0;
        }
        let mut best = 0.0;
        let mut on_path = BTreeSet::from([a]);
        self.search(a, b, 1.0, max_depth, &mut on_path, &mut best);
        best
    }

    fn search(&self, at: NodeId, target: NodeId, acc: f64, depth_left: usize, on_path: &mut BTreeSet<NodeId>, best: &mut f64) {
        if depth_left == 0 {
            return;
        }
        for (next, w) in self.out_edges(at) {
            if w <= 0.0 || on_path.contains(&next) {
                continue;
            }
            let p = acc * w;
            // Weights never exceed 1, so a prefix no better than `best` cannot improve it.
            if p <= *best {
                continue;
            }
            if next == target {
                *best = p;
                continue;
            }
            on_path.insert(next);
            self.search(next, target, p, depth_left - 1, on_path, best);
            on_path.remove(&next);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProvisioningScheme {
    Cip {
        authority: NodeId,
    },
    Dip {
        quorum: usize,
        trust_threshold: f64,
        max_depth: usize,
    },
    ProportionalRepresentation {
        self_governed: BTreeSet<NodeId>,
        fallback: Box<ProvisioningScheme>,
    },
}

impl ProvisioningScheme {
    pub fn dip(quorum: usize, trust_threshold: f64, max_depth: usize) -> Self {
        Self::Dip {
            quorum: quorum.max(1),
            trust_threshold,
            max_depth: max_depth.max(1),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Cip { .. } => "cip",
            Self::Dip { .. } => "dip",
            Self::ProportionalRepresentation { .. } => "pr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectionReason {
    AuthorityUnavailable,
    InsufficientQuorum,
    PrincipalOffline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub principal: NodeId,
    pub token: u64,
    pub attestations: Vec<(NodeId, SimTime)>,
    pub scheme: ProvisioningScheme,
    pub issued_at: SimTime,
    /// The authority for CIP, the principal itself when self-governed,
    /// `None` for quorum-issued records.
    pub issuer: Option<NodeId>,
}

/// Hands out unique opaque tokens.
#[derive(Debug, Clone, Default)]
pub struct TokenMint {
    next: u64,
}

impl TokenMint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mint(&mut self) -> u64 {
        let t = self.next;
        self.next += 1;
        t
    }
}

/// Attesters that currently qualify from `view`'s standpoint.
fn qualifying_attesters<'a>(
    graph: &'a TrustGraph,
    principal: NodeId,
    view: NodeId,
    threshold: f64,
    max_depth: usize,
    pool: impl Iterator<Item = NodeId> + 'a,
) -> impl Iterator<Item = NodeId> + 'a {
    pool.filter(move |&x| x != principal && graph.weight(x, principal) >= threshold && graph.trust_path_score(view, x, max_depth) >= threshold)
}

pub fn provision(
    principal: NodeId,
    scheme: &ProvisioningScheme,
    graph: &TrustGraph,
    verifier_view: NodeId,
    now: SimTime,
    online: &dyn Fn(NodeId) -> bool,
    tokens: &mut TokenMint,
) -> Result<IdentityRecord, RejectionReason> {
    if !online(principal) {
        return Err(RejectionReason::PrincipalOffline);
    }
    let (attestations, issuer) = match scheme {
        ProvisioningScheme::Cip { authority } => {
            if !online(*authority) {
                return Err(RejectionReason::AuthorityUnavailable);
            }
            (vec![(*authority, now)], Some(*authority))
        }
        ProvisioningScheme::Dip {
            quorum,
            trust_threshold,
            max_depth,
        } => {
            let attesters: Vec<NodeId> = qualifying_attesters(graph, principal, verifier_view, *trust_threshold, *max_depth, graph.nodes()).collect();
            if attesters.len() < *quorum {
                return Err(RejectionReason::InsufficientQuorum);
            }
            (attesters.into_iter().map(|a| (a, now)).collect(), None)
        }
        ProvisioningScheme::ProportionalRepresentation { self_governed, fallback } => {
            if !self_governed.contains(&principal) {
                return provision(principal, fallback, graph, verifier_view, now, online, tokens);
            }
            (Vec::new(), Some(principal))
        }
    };
    Ok(IdentityRecord {
        principal,
        token: tokens.mint(),
        attestations,
        scheme: scheme.clone(),
        issued_at: now,
        issuer,
    })
}

/// Re-derives the issuing condition from `verifier`'s own view.
pub fn verify(verifier: NodeId, record: &IdentityRecord, graph: &TrustGraph, scheme: &ProvisioningScheme, online: &dyn Fn(NodeId) -> bool) -> bool {
    match scheme {
        ProvisioningScheme::Cip { authority } => record.issuer == Some(*authority) && online(*authority),
        ProvisioningScheme::Dip {
            quorum,
            trust_threshold,
            max_depth,
        } => {
            let attesters: BTreeSet<NodeId> = record.attestations.iter().map(|(a, _)| *a).collect();
            let valid = qualifying_attesters(graph, record.principal, verifier, *trust_threshold, *max_depth, attesters.into_iter()).count();
            valid >= *quorum
        }
        ProvisioningScheme::ProportionalRepresentation { self_governed, fallback } => {
            if self_governed.contains(&record.principal) {
                record.issuer == Some(record.principal)
            } else {
                verify(verifier, record, graph, fallback, online)
            }
        }
    }
}

/// Fraction of `principals` that obtain an identity under `scheme`.
pub fn provisioning_success_rate(
    principals: &[NodeId],
    scheme: &ProvisioningScheme,
    graph: &TrustGraph,
    verifier_view: NodeId,
    now: SimTime,
    online: &dyn Fn(NodeId) -> bool,
) -> f64 {
    if principals.is_empty() {
        return 0.0;
    }
    let mut mint = TokenMint::new();
    let ok = principals
        .iter()
        .filter(|&&p| provision(p, scheme, graph, verifier_view, now, online, &mut mint).is_ok())
        .count();
    ok as f64 / principals.len() as f64
}
