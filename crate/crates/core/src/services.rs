//! Service and resource layers: the distributed service repository (DSR)
//! with versioned descriptors and replicated code blobs, on-demand
//! instantiation, owner-sealed remote storage, swarm chunk distribution and
//! hybrid push/pull replica placement.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dvsp::Reachability;
use crate::peers::Capacity;
use crate::simnet::topology::Topology;
use crate::simnet::trace::hash_bytes;
use crate::simnet::{NodeId, Sim, SimTime, Trace};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServiceId(pub String);

impl ServiceId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub type BlobHash = u64;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ServiceError {
    #[error("no repository node online")]
    NoRepositoryNodes,
    #[error("blob hash mismatch: expected {expected:016x}, got {actual:016x}")]
    HashMismatch { expected: BlobHash, actual: BlobHash },
    #[error("version {given} of {service} does not supersede {current}")]
    StaleVersion { service: ServiceId, given: u32, current: u32 },
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("no replica online")]
    NoReplicaOnline,
    #[error("node {0} is not suitable for instantiation")]
    UnsuitableNode(NodeId),
    #[error("access denied")]
    AccessDenied,
    #[error("holder {0} offline")]
    HolderOffline(NodeId),
    #[error("bad descriptor: {0}")]
    BadDescriptor(String),
}

/// Executable code as fixed-size chunks; one chunk is one bandwidth unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBlob {
    pub chunks: Vec<Vec<u8>>,
}

pub const CHUNK_BYTES: usize = 64;

impl CodeBlob {
    pub fn new(chunks: Vec<Vec<u8>>) -> Self {
        Self { chunks }
    }

    /// Deterministic filler content derived from `label`.
    pub fn synthetic(label: &str, chunks: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_bytes(label.as_bytes()));
        let chunks = (0..chunks).map(|_| (0..CHUNK_BYTES).map(|_| rng.gen()).collect()).collect();
        Self { chunks }
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn hash(&self) -> BlobHash {
        let mut buf = Vec::new();
        for c in &self.chunks {
            buf.extend_from_slice(&(c.len() as u64).to_le_bytes());
            buf.extend_from_slice(c);
        }
        hash_bytes(&buf)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub service_id: ServiceId,
    pub semantic_tags: BTreeSet<String>,
    pub version: u32,
    pub blob_hash: BlobHash,
    pub blob_size: usize,
}

impl ServiceDescriptor {
    pub fn for_blob(service_id: ServiceId, tags: impl IntoIterator<Item = impl Into<String>>, version: u32, blob: &CodeBlob) -> Self {
        Self {
            service_id,
            semantic_tags: tags.into_iter().map(|t| t.into().to_lowercase()).collect(),
            version,
            blob_hash: blob.hash(),
            blob_size: blob.len(),
        }
    }

    pub fn matches(&self, query: &BTreeSet<String>) -> bool {
        query.is_subset(&self.semantic_tags)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstSource {
    Push,
    Pull,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instantiation {
    pub service_id: ServiceId,
    pub node: NodeId,
    pub started_at: SimTime,
    pub source: InstSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishReport {
    pub replicas: BTreeSet<NodeId>,
    pub under_replicated: bool,
}

/// Replicated repository state. The index is held by every super-peer
/// member listed in `index_holders`; blobs live on their replica holders.
#[derive(Debug, Clone)]
pub struct Dsr {
    pub replication: usize,
    index: BTreeMap<ServiceId, ServiceDescriptor>,
    blobs: BTreeMap<BlobHash, CodeBlob>,
    holders: BTreeMap<BlobHash, BTreeSet<NodeId>>,
    pushed: BTreeMap<BlobHash, BTreeSet<NodeId>>,
    index_holders: BTreeSet<NodeId>,
    instantiations: Vec<Instantiation>,
}

impl Dsr {
    pub fn new(replication: usize) -> Self {
        Self {
            replication: replication.max(1),
            index: BTreeMap::new(),
            blobs: BTreeMap::new(),
            holders: BTreeMap::new(),
            pushed: BTreeMap::new(),
            index_holders: BTreeSet::new(),
            instantiations: Vec::new(),
        }
    }

    pub fn descriptor(&self, id: &ServiceId) -> Option<&ServiceDescriptor> {
        self.index.get(id)
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &ServiceDescriptor> {
        self.index.values()
    }

    pub fn replicas(&self, id: &ServiceId) -> BTreeSet<NodeId> {
        self.index
            .get(id)
            .and_then(|d| self.holders.get(&d.blob_hash))
            .cloned()
            .unwrap_or_default()
    }

    pub fn holds(&self, node: NodeId, id: &ServiceId) -> bool {
        self.replicas(id).contains(&node)
    }

    pub fn index_holders(&self) -> &BTreeSet<NodeId> {
        &self.index_holders
    }

    /// Copies the index to newly elected members.
    pub fn sync_index(&mut self, members: impl IntoIterator<Item = NodeId>) {
        self.index_holders.extend(members);
    }

    pub fn instantiations(&self) -> &[Instantiation] {
        &self.instantiations
    }

    pub fn blob(&self, hash: BlobHash) -> Option<&CodeBlob> {
        self.blobs.get(&hash)
    }

    /// Replicates the blob to up to `r` online members (lowest ids first) and
    /// indexes the descriptor on every online member.
    pub fn publish<P: Clone + fmt::Debug>(
        &mut self,
        sim: &mut Sim<P>,
        members: &[NodeId],
        descriptor: ServiceDescriptor,
        blob: CodeBlob,
    ) -> Result<PublishReport, ServiceError> {
        let actual = blob.hash();
        if actual != descriptor.blob_hash || blob.len() != descriptor.blob_size {
            return Err(ServiceError::HashMismatch {
                expected: descriptor.blob_hash,
                actual,
            });
        }
        if let Some(cur) = self.index.get(&descriptor.service_id) {
            if descriptor.version <= cur.version {
                return Err(ServiceError::StaleVersion {
                    service: descriptor.service_id.clone(),
                    given: descriptor.version,
                    current: cur.version,
                });
            }
        }
        let online: BTreeSet<NodeId> = members.iter().copied().filter(|m| sim.is_online(*m)).collect();
        if online.is_empty() {
            return Err(ServiceError::NoRepositoryNodes);
        }
        let replicas: BTreeSet<NodeId> = online.iter().copied().take(self.replication).collect();
        let under = replicas.len() < self.replication;
        let hash = descriptor.blob_hash;
        sim.record(
            None,
            "PUB",
            format!(
                "service={} version={} hash={hash:016x} replicas={}",
                descriptor.service_id,
                descriptor.version,
                replicas.len()
            ),
        );
        if under {
            sim.record(
                None,
                "WARN",
                format!(
                    "UnderReplicated service={} have={} want={}",
                    descriptor.service_id,
                    replicas.len(),
                    self.replication
                ),
            );
        }
        self.blobs.insert(hash, blob);
        self.holders.entry(hash).or_default().extend(replicas.iter().copied());
        self.index_holders.extend(online);
        self.index.insert(descriptor.service_id.clone(), descriptor);
        Ok(PublishReport {
            replicas,
            under_replicated: under,
        })
    }

    /// Newest descriptor of every service whose tags contain `query`,
    /// ordered by service id.
    pub fn lookup(&self, query: &BTreeSet<String>) -> Vec<ServiceDescriptor> {
        self.index.values().filter(|d| d.matches(query)).cloned().collect()
    }

    fn holders_reachable_from<R: Reachability>(&self, net: &R, hash: BlobHash, to: NodeId) -> Vec<NodeId> {
        self.holders
            .get(&hash)
            .into_iter()
            .flatten()
            .copied()
            .filter(|h| net.online(*h) && !net.separated(*h, to))
            .collect()
    }

    /// Starts `service` on every target, fetching the blob by swarm for
    /// targets that lack it.
    pub fn instantiate_many<P: Clone + fmt::Debug>(
        &mut self,
        sim: &mut Sim<P>,
        service: &ServiceId,
        targets: &[(NodeId, Capacity)],
    ) -> Result<Vec<Instantiation>, ServiceError> {
        let d = self
            .index
            .get(service)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownService(service.clone()))?;
        for (n, cap) in targets {
            if !sim.is_online(*n) || cap.compute_units < 1 || sim.is_nat(*n) {
                return Err(ServiceError::UnsuitableNode(*n));
            }
        }
        let missing: Vec<NodeId> = targets.iter().map(|(n, _)| *n).filter(|n| !self.holds(*n, service)).collect();
        if !missing.is_empty() {
            swarm_fetch(sim, self, d.blob_hash, &missing, FetchMode::Swarm, None)?;
        }
        let mut out = Vec::new();
        for (n, _) in targets {
            let source = if self.pushed.get(&d.blob_hash).is_some_and(|p| p.contains(n)) {
                InstSource::Push
            } else {
                InstSource::Pull
            };
            let inst = Instantiation {
                service_id: service.clone(),
                node: *n,
                started_at: sim.now(),
                source,
            };
            sim.record(Some(*n), "INST", format!("service={service} version={}", d.version));
            self.instantiations.push(inst.clone());
            out.push(inst);
        }
        Ok(out)
    }

    pub fn instantiate<P: Clone + fmt::Debug>(
        &mut self,
        sim: &mut Sim<P>,
        service: &ServiceId,
        target: NodeId,
        capacity: Capacity,
    ) -> Result<Instantiation, ServiceError> {
        Ok(self.instantiate_many(sim, service, &[(target, capacity)])?.remove(0))
    }

    pub fn apply_push(&mut self, trace: &mut Trace, now: SimTime, action: &PlacementAction) {
        let PlacementAction::Push { service, node } = action;
        let Some(d) = self.index.get(service) else { return };
        let hash = d.blob_hash;
        self.holders.entry(hash).or_default().insert(*node);
        self.pushed.entry(hash).or_default().insert(*node);
        trace.record(now, Some(*node), "PUSH", format!("service={service}"));
    }

    /// Adds a holder directly (initial placement, e.g. a service's home node).
    pub fn add_holder(&mut self, service: &ServiceId, node: NodeId) {
        if let Some(d) = self.index.get(service) {
            self.holders.entry(d.blob_hash).or_default().insert(node);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchMode {
    /// Downloaders re-serve received chunks.
    Swarm,
    /// Every downloader pulls every chunk from a seed.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Upload {
    pub round: u32,
    pub from: NodeId,
    pub to: NodeId,
    pub chunk: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwarmReport {
    pub uploads: Vec<Upload>,
    pub rounds: u32,
    pub seed_uploads: usize,
}

/// Round-based chunk distribution from the online holders of `hash` to
/// `requesters`. Each node uploads at most one chunk and receives at most one
/// chunk per round. In swarm mode seeds only serve chunks that no downloader
/// has yet, and downloaders serve rarest chunks first; ties break by chunk
/// index, then node id. `corrupt` flips a byte of one chunk as it reaches the
/// given node.
pub fn swarm_fetch<P: Clone + fmt::Debug>(
    sim: &mut Sim<P>,
    dsr: &mut Dsr,
    hash: BlobHash,
    requesters: &[NodeId],
    mode: FetchMode,
    corrupt: Option<(NodeId, u32)>,
) -> Result<SwarmReport, ServiceError> {
    let blob = dsr.blobs.get(&hash).cloned().ok_or(ServiceError::NoReplicaOnline)?;
    let downloaders: Vec<NodeId> = requesters
        .iter()
        .copied()
        .filter(|r| !dsr.holders.get(&hash).is_some_and(|h| h.contains(r)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let seeds: Vec<NodeId> = match downloaders.first() {
        Some(&d) => dsr.holders_reachable_from(sim, hash, d),
        None => {
            return Ok(SwarmReport {
                uploads: Vec::new(),
                rounds: 0,
                seed_uploads: 0,
            })
        }
    };
    if seeds.is_empty() {
        return Err(ServiceError::NoReplicaOnline);
    }
    let c = blob.len() as u32;
    let mut have: BTreeMap<NodeId, BTreeSet<u32>> = downloaders.iter().map(|d| (*d, BTreeSet::new())).collect();
    let mut uploads = Vec::new();
    let mut round = 0u32;
    let done = |have: &BTreeMap<NodeId, BTreeSet<u32>>| have.values().all(|s| s.len() == c as usize);
    while !done(&have) {
        round += 1;
        let mut busy_rx: BTreeSet<NodeId> = BTreeSet::new();
        let mut incoming: Vec<(NodeId, u32)> = Vec::new();
        let mut counts: BTreeMap<u32, usize> = (0..c).map(|k| (k, 0)).collect();
        for s in have.values() {
            for k in s {
                *counts.get_mut(k).expect("chunk index") += 1;
            }
        }
        let uploaders: Vec<NodeId> = match mode {
            FetchMode::Swarm => downloaders.iter().chain(seeds.iter()).copied().collect(),
            FetchMode::Naive => seeds.clone(),
        };
        for u in uploaders {
            let is_seed = seeds.contains(&u);
            let avail: Vec<u32> = if is_seed { (0..c).collect() } else { have[&u].iter().copied().collect() };
            let mut best: Option<(usize, u32, NodeId)> = None;
            for k in avail {
                if mode == FetchMode::Swarm && is_seed && counts[&k] > 0 {
                    continue;
                }
                let Some(r) = downloaders
                    .iter()
                    .copied()
                    .find(|r| *r != u && !busy_rx.contains(r) && !have[r].contains(&k) && !sim.separated(u, *r))
                else {
                    continue;
                };
                let key = (counts[&k], k, r);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
            if let Some((_, k, r)) = best {
                busy_rx.insert(r);
                *counts.get_mut(&k).expect("chunk index") += 1;
                incoming.push((r, k));
                uploads.push(Upload {
                    round,
                    from: u,
                    to: r,
                    chunk: k,
                });
                sim.record(Some(u), "UPLOAD", format!("to={r} chunk={k} hash={hash:016x} seed={}", u8::from(is_seed)));
            }
        }
        if incoming.is_empty() {
            return Err(ServiceError::NoReplicaOnline);
        }
        for (r, k) in incoming {
            have.get_mut(&r).expect("downloader").insert(k);
        }
    }
    for d in &downloaders {
        let mut chunks = blob.chunks.clone();
        if let Some((n, k)) = corrupt {
            if n == *d {
                if let Some(b) = chunks.get_mut(k as usize).and_then(|ch| ch.first_mut()) {
                    *b ^= 0xff;
                }
            }
        }
        let actual = CodeBlob::new(chunks).hash();
        if actual != hash {
            sim.record(Some(*d), "FETCH", format!("hash={hash:016x} ok=0"));
            return Err(ServiceError::HashMismatch { expected: hash, actual });
        }
        sim.record(Some(*d), "FETCH", format!("hash={hash:016x} chunks={c} ok=1"));
        dsr.holders.entry(hash).or_default().insert(*d);
    }
    let seed_uploads = uploads.iter().filter(|u| seeds.contains(&u.from)).count();
    Ok(SwarmReport {
        uploads,
        rounds: round,
        seed_uploads,
    })
}

/// Remote chunk held on behalf of `owner`. Sealed whenever the holder is not
/// the owner; sealed content is released to the owner only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredChunk {
    pub owner: NodeId,
    pub holder: NodeId,
    pub chunk_id: u32,
    pub sealed: bool,
    data: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct ChunkStore {
    chunks: BTreeMap<(NodeId, u32), Vec<StoredChunk>>,
    next_id: BTreeMap<NodeId, u32>,
}

impl ChunkStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Places every chunk on every holder in `placement`.
    pub fn store<P: Clone + fmt::Debug>(
        &mut self,
        sim: &mut Sim<P>,
        owner: NodeId,
        data: Vec<Vec<u8>>,
        placement: &[NodeId],
    ) -> Result<Vec<u32>, ServiceError> {
        if let Some(h) = placement.iter().find(|h| !sim.is_online(**h)) {
            return Err(ServiceError::HolderOffline(*h));
        }
        let mut ids = Vec::with_capacity(data.len());
        for chunk in data {
            let next = self.next_id.entry(owner).or_insert(0);
            let id = *next;
            *next += 1;
            let copies = placement
                .iter()
                .map(|&holder| {
                    let sealed = holder != owner;
                    sim.record(Some(holder), "STORE", format!("owner={owner} chunk={id} sealed={}", u8::from(sealed)));
                    StoredChunk {
                        owner,
                        holder,
                        chunk_id: id,
                        sealed,
                        data: chunk.clone(),
                    }
                })
                .collect();
            self.chunks.insert((owner, id), copies);
            ids.push(id);
        }
        Ok(ids)
    }

    pub fn holders(&self, owner: NodeId, chunk: u32) -> Vec<NodeId> {
        self.chunks
            .get(&(owner, chunk))
            .map(|v| v.iter().map(|c| c.holder).collect())
            .unwrap_or_default()
    }

    /// Returns the owner's chunks from any reachable holder.
    pub fn fetch<P: Clone + fmt::Debug>(
        &self,
        sim: &mut Sim<P>,
        requester: NodeId,
        owner: NodeId,
        chunk_ids: &[u32],
    ) -> Result<Vec<Vec<u8>>, ServiceError> {
        let mut out = Vec::with_capacity(chunk_ids.len());
        for &id in chunk_ids {
            let copies = self.chunks.get(&(owner, id)).map(Vec::as_slice).unwrap_or(&[]);
            let Some(copy) = copies.iter().find(|c| sim.is_online(c.holder) && !sim.separated(c.holder, requester)) else {
                let h = copies.first().map(|c| c.holder).unwrap_or(owner);
                return Err(ServiceError::HolderOffline(h));
            };
            if requester != owner && copy.sealed {
                sim.record(
                    Some(copy.holder),
                    "FETCH",
                    format!("owner={owner} chunk={id} to={requester} content=0 denied=1"),
                );
                return Err(ServiceError::AccessDenied);
            }
            sim.record(Some(copy.holder), "FETCH", format!("owner={owner} chunk={id} to={requester} content=1"));
            out.push(copy.data.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub window: u64,
    pub push_threshold: usize,
    pub r_push: usize,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            window: 3600,
            push_threshold: 5,
            r_push: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlacementAction {
    Push { service: ServiceId, node: NodeId },
}

/// Request log used for demand statistics.
#[derive(Debug, Clone, Default)]
pub struct DemandStats {
    requests: BTreeMap<ServiceId, Vec<(SimTime, NodeId)>>,
}

impl DemandStats {
    pub fn record(&mut self, service: &ServiceId, node: NodeId, at: SimTime) {
        self.requests.entry(service.clone()).or_default().push((at, node));
    }

    fn in_window<'a>(&'a self, service: &ServiceId, now: SimTime, window: u64) -> impl Iterator<Item = NodeId> + 'a {
        let from = now.ticks().saturating_sub(window);
        self.requests
            .get(service)
            .into_iter()
            .flatten()
            .filter(move |(t, _)| t.ticks() >= from && *t <= now)
            .map(|(_, n)| *n)
    }

    pub fn count(&self, service: &ServiceId, now: SimTime, window: u64) -> usize {
        self.in_window(service, now, window).count()
    }

    /// Requesting nodes by request count descending, id ascending.
    pub fn top_nodes(&self, service: &ServiceId, now: SimTime, window: u64) -> Vec<NodeId> {
        let mut per: BTreeMap<NodeId, usize> = BTreeMap::new();
        for n in self.in_window(service, now, window) {
            *per.entry(n).or_default() += 1;
        }
        let mut v: Vec<(NodeId, usize)> = per.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().map(|(n, _)| n).collect()
    }

    pub fn services(&self) -> impl Iterator<Item = &ServiceId> {
        self.requests.keys()
    }
}

/// Push copies toward the heaviest requesters of every service whose
/// trailing-window demand reaches the threshold, up to `r_push` pushed
/// copies per service.
pub fn place_push_pull(dsr: &Dsr, demand: &DemandStats, now: SimTime, cfg: &PlacementConfig) -> Vec<PlacementAction> {
    let mut out = Vec::new();
    for service in demand.services() {
        let Some(d) = dsr.descriptor(service) else { continue };
        if demand.count(service, now, cfg.window) < cfg.push_threshold {
            continue;
        }
        let already = dsr.pushed.get(&d.blob_hash).map_or(0, BTreeSet::len);
        let holders = dsr.replicas(service);
        let room = cfg.r_push.saturating_sub(already);
        out.extend(
            demand
                .top_nodes(service, now, cfg.window)
                .into_iter()
                .filter(|n| !holders.contains(n))
                .take(room)
                .map(|node| PlacementAction::Push {
                    service: service.clone(),
                    node,
                }),
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementPolicy {
    PullOnly,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadRequest {
    pub at: SimTime,
    pub node: NodeId,
    pub service: ServiceId,
}

/// Services with one home holder each, and a request stream whose demand
/// concentrates around a per-service hot node.
#[derive(Debug, Clone)]
pub struct Workload {
    pub topology: Topology,
    pub homes: Vec<(ServiceId, NodeId)>,
    pub requests: Vec<WorkloadRequest>,
    pub base_latency: u64,
}

impl Workload {
    pub fn generate(topology: Topology, services: usize, requests: usize, duration: u64, base_latency: u64, seed: u64) -> Self {
        let n = topology.node_count() as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let homes: Vec<(ServiceId, NodeId)> = (0..services)
            .map(|i| (ServiceId::new(format!("svc{i}")), NodeId(rng.gen_range(0..n))))
            .collect();
        let ids: Vec<ServiceId> = homes.iter().map(|(s, _)| s.clone()).collect();
        let requests = demand_stream(&topology, &ids, requests, duration, &mut rng);
        Self {
            topology,
            homes,
            requests,
            base_latency,
        }
    }

    /// Replays the request stream. Each request is served from the nearest
    /// holder at `hops × base_latency`; under the hybrid policy placement
    /// runs after every request so pushes precede the next request.
    pub fn run(&self, policy: PlacementPolicy, cfg: &PlacementConfig) -> Trace {
        let mut trace = Trace::default();
        let mut dsr = Dsr::new(1);
        for (id, home) in &self.homes {
            let blob = CodeBlob::synthetic(id.as_str(), 1);
            let d = ServiceDescriptor::for_blob(id.clone(), ["workload"], 1, &blob);
            dsr.blobs.insert(d.blob_hash, blob);
            dsr.holders.entry(d.blob_hash).or_default().insert(*home);
            dsr.index.insert(id.clone(), d);
        }
        let mut demand = DemandStats::default();
        for r in &self.requests {
            let holders = dsr.replicas(&r.service);
            let dist = self.topology.distances_from(r.node.0);
            let hops = holders.iter().filter_map(|h| dist[h.0 as usize]).min();
            let detail = match hops {
                Some(h) => format!("service={} hops={h} latency={}", r.service, h as u64 * self.base_latency),
                None => format!("service={} unreachable=1", r.service),
            };
            trace.record(r.at, Some(r.node), "REQUEST", detail);
            demand.record(&r.service, r.node, r.at);
            if policy == PlacementPolicy::Hybrid {
                for a in place_push_pull(&dsr, &demand, r.at, cfg) {
                    dsr.apply_push(&mut trace, r.at, &a);
                }
            }
        }
        trace
    }
}

/// Request stream with Zipf-like service popularity (weight `1/(i+1)`);
/// 70% of requests come from a per-service hot node or its neighbours, the
/// rest from uniformly random nodes. Sorted by time.
pub fn demand_stream(topology: &Topology, services: &[ServiceId], count: usize, duration: u64, rng: &mut ChaCha8Rng) -> Vec<WorkloadRequest> {
    let n = topology.node_count() as u32;
    if services.is_empty() || n == 0 {
        return Vec::new();
    }
    let hot: Vec<u32> = services.iter().map(|_| rng.gen_range(0..n)).collect();
    let weights: Vec<f64> = (0..services.len()).map(|i| 1.0 / (i + 1) as f64).collect();
    let total: f64 = weights.iter().sum();
    let mut reqs: Vec<WorkloadRequest> = (0..count)
        .map(|_| {
            let mut x = rng.gen::<f64>() * total;
            let mut s = services.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if x < *w {
                    s = i;
                    break;
                }
                x -= w;
            }
            let node = if rng.gen_bool(0.7) {
                let nb: Vec<u32> = std::iter::once(hot[s]).chain(topology.neighbors(hot[s])).collect();
                nb[rng.gen_range(0..nb.len())]
            } else {
                rng.gen_range(0..n)
            };
            WorkloadRequest {
                at: SimTime(rng.gen_range(0..duration.max(1))),
                node: NodeId(node),
                service: services[s].clone(),
            }
        })
        .collect();
    reqs.sort_by_key(|r| (r.at, r.node, r.service.clone()));
    reqs
}

/// Mean of the `latency` field over `REQUEST` records.
pub fn mean_request_latency(trace: &Trace) -> Option<f64> {
    let lat: Vec<u64> = trace.with_tag("REQUEST").filter_map(|e| e.field_parse("latency")).collect();
    (!lat.is_empty()).then(|| lat.iter().sum::<u64>() as f64 / lat.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::topology::{generate_topology, TopologyKind};
    use crate::simnet::{Fault, LinkModel};
    use proptest::prelude::*;

    fn sim(n: usize) -> Sim<()> {
        let mut s = Sim::new(LinkModel::default(), 1).unwrap();
        for _ in 0..n {
            s.add_node(false);
        }
        s
    }

    fn tags(t: &[&str]) -> BTreeSet<String> {
        t.iter().map(|s| s.to_string()).collect()
    }

    fn publish(
        dsr: &mut Dsr,
        s: &mut Sim<()>,
        members: &[NodeId],
        id: &str,
        t: &[&str],
        version: u32,
        chunks: usize,
    ) -> Result<PublishReport, ServiceError> {
        let blob = CodeBlob::synthetic(&format!("{id}@{version}"), chunks);
        let d = ServiceDescriptor::for_blob(ServiceId::new(id), t.iter().copied(), version, &blob);
        dsr.publish(s, members, d, blob)
    }

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().map(|i| NodeId(*i)).collect()
    }

    #[test]
    fn publish_replicates_to_r_members() {
        let mut s = sim(6);
        let mut dsr = Dsr::new(3);
        let r = publish(&mut dsr, &mut s, &ids(&[1, 2, 3, 4, 5]), "pay", &["pay"], 1, 2).unwrap();
        assert_eq!(r.replicas.len(), 3);
        assert!(!r.under_replicated);
    }

    #[test]
    fn publish_under_replicated_warns() {
        let mut s = sim(6);
        s.inject_fault(Fault::Crash(NodeId(3))).unwrap();
        let mut dsr = Dsr::new(3);
        let r = publish(&mut dsr, &mut s, &ids(&[1, 2, 3]), "pay", &["pay"], 1, 2).unwrap();
        assert_eq!(r.replicas, BTreeSet::from([NodeId(1), NodeId(2)]));
        assert!(r.under_replicated);
        assert_eq!(s.trace().count_tag("WARN"), 1);
    }

    #[test]
    fn publish_needs_an_online_member() {
        let mut s = sim(2);
        s.inject_fault(Fault::Crash(NodeId(1))).unwrap();
        let mut dsr = Dsr::new(1);
        assert_eq!(
            publish(&mut dsr, &mut s, &ids(&[1]), "x", &[], 1, 1),
            Err(ServiceError::NoRepositoryNodes)
        );
    }

    #[test]
    fn hash_mismatch_rejected() {
        let mut s = sim(2);
        let mut dsr = Dsr::new(1);
        let blob = CodeBlob::synthetic("a", 2);
        let mut d = ServiceDescriptor::for_blob(ServiceId::new("a"), ["t"], 1, &blob);
        d.blob_hash ^= 1;
        let err = dsr.publish(&mut s, &[NodeId(0)], d, blob).unwrap_err();
        assert!(matches!(err, ServiceError::HashMismatch { .. }));
    }

    #[test]
    fn versions_supersede() {
        let mut s = sim(3);
        let mut dsr = Dsr::new(1);
        publish(&mut dsr, &mut s, &ids(&[1]), "pay", &["pay"], 1, 1).unwrap();
        publish(&mut dsr, &mut s, &ids(&[1]), "pay", &["pay"], 2, 1).unwrap();
        let found = dsr.lookup(&tags(&["pay"]));
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].version, 2);
        assert!(matches!(
            publish(&mut dsr, &mut s, &ids(&[1]), "pay", &["pay"], 2, 1),
            Err(ServiceError::StaleVersion { .. })
        ));
    }

    #[test]
    fn lookup_subset_semantics() {
        let mut s = sim(2);
        let mut dsr = Dsr::new(1);
        publish(&mut dsr, &mut s, &ids(&[1]), "b", &["pay", "eu", "b2b"], 1, 1).unwrap();
        publish(&mut dsr, &mut s, &ids(&[1]), "a", &["ship"], 1, 1).unwrap();
        assert_eq!(dsr.lookup(&BTreeSet::new()).len(), 2);
        let hit = dsr.lookup(&tags(&["pay", "eu"]));
        assert_eq!(hit.len(), 1);
        assert_eq!(hit[0].service_id.as_str(), "b");
        let all: Vec<String> = dsr.lookup(&BTreeSet::new()).into_iter().map(|d| d.service_id.0).collect();
        assert_eq!(all, vec!["a", "b"]);
    }

    const VOCAB: [&str; 6] = ["pay", "eu", "b2b", "ship", "tax", "crm"];

    proptest! {
        #[test]
        fn lookup_matches_linear_scan(
            services in proptest::collection::vec((0usize..12, proptest::collection::btree_set(0usize..6, 0..4)), 1..50),
            query in proptest::collection::btree_set(0usize..6, 0..3),
        ) {
            let mut s = sim(2);
            let mut dsr = Dsr::new(1);
            let mut published: Vec<ServiceDescriptor> = Vec::new();
            let mut version: BTreeMap<usize, u32> = BTreeMap::new();
            for (id, t) in &services {
                let v = version.entry(*id).or_insert(0);
                *v += 1;
                let t: Vec<&str> = t.iter().map(|i| VOCAB[*i]).collect();
                let name = format!("s{id:02}");
                publish(&mut dsr, &mut s, &ids(&[1]), &name, &t, *v, 1).unwrap();
                published.push(dsr.descriptor(&ServiceId::new(name)).unwrap().clone());
            }
            let q: BTreeSet<String> = query.iter().map(|i| VOCAB[*i].to_string()).collect();
            let mut newest: BTreeMap<ServiceId, ServiceDescriptor> = BTreeMap::new();
            for d in published {
                let keep = newest.get(&d.service_id).is_none_or(|cur| cur.version < d.version);
                if keep {
                    newest.insert(d.service_id.clone(), d);
                }
            }
            let oracle: Vec<ServiceDescriptor> = newest.into_values().filter(|d| q.iter().all(|t| d.semantic_tags.contains(t))).collect();
            prop_assert_eq!(dsr.lookup(&q), oracle);
        }

        #[test]
        fn fetch_availability_matches_holder_subsets(alive in proptest::collection::vec(any::<bool>(), 3)) {
            let mut s = sim(4);
            let mut store = ChunkStore::new();
            let owner = NodeId(0);
            let placement = ids(&[1, 2, 3]);
            let cid = store.store(&mut s, owner, vec![vec![7, 8, 9]], &placement).unwrap();
            for (i, up) in alive.iter().enumerate() {
                if !up {
                    s.inject_fault(Fault::Crash(placement[i])).unwrap();
                }
            }
            let oracle = alive.iter().any(|a| *a);
            let got = store.fetch(&mut s, owner, owner, &cid);
            prop_assert_eq!(got.is_ok(), oracle);
            if oracle {
                prop_assert_eq!(got.unwrap(), vec![vec![7u8, 8, 9]]);
            }
        }
    }

    #[test]
    fn sealed_chunks_only_reach_owner() {
        let mut s = sim(3);
        let mut store = ChunkStore::new();
        let cid = store.store(&mut s, NodeId(0), vec![b"secret".to_vec()], &ids(&[1, 2])).unwrap();
        assert_eq!(store.fetch(&mut s, NodeId(0), NodeId(0), &cid).unwrap(), vec![b"secret".to_vec()]);
        assert_eq!(store.fetch(&mut s, NodeId(2), NodeId(0), &cid), Err(ServiceError::AccessDenied));
        for e in s.trace().with_tag("FETCH") {
            if e.field("content") == Some("1") {
                assert_eq!(e.field("to"), Some("0"));
            }
        }
        s.inject_fault(Fault::Crash(NodeId(1))).unwrap();
        assert!(store.fetch(&mut s, NodeId(0), NodeId(0), &cid).is_ok());
    }

    #[test]
    fn store_needs_online_holders() {
        let mut s = sim(3);
        s.inject_fault(Fault::Crash(NodeId(2))).unwrap();
        let mut store = ChunkStore::new();
        assert_eq!(
            store.store(&mut s, NodeId(0), vec![vec![1]], &ids(&[1, 2])),
            Err(ServiceError::HolderOffline(NodeId(2)))
        );
    }

    fn swarm_setup(downloaders: usize, chunks: usize) -> (Sim<()>, Dsr, BlobHash) {
        let mut s = sim(downloaders + 1);
        let mut dsr = Dsr::new(1);
        publish(&mut dsr, &mut s, &ids(&[0]), "blob", &[], 1, chunks).unwrap();
        let h = dsr.descriptor(&ServiceId::new("blob")).unwrap().blob_hash;
        (s, dsr, h)
    }

    #[test]
    fn swarm_seed_uploads_each_chunk_once() {
        for mode in [FetchMode::Swarm, FetchMode::Naive] {
            let (mut s, mut dsr, h) = swarm_setup(4, 4);
            let rep = swarm_fetch(&mut s, &mut dsr, h, &ids(&[1, 2, 3, 4]), mode, None).unwrap();
            let seed_uploads = s.trace().with_tag("UPLOAD").filter(|e| e.node == Some(NodeId(0))).count();
            let total = s.trace().count_tag("UPLOAD");
            assert_eq!(seed_uploads, rep.seed_uploads);
            match mode {
                FetchMode::Swarm => assert_eq!((seed_uploads, total), (4, 16)),
                FetchMode::Naive => assert_eq!((seed_uploads, total), (16, 16)),
            }
            assert_eq!(dsr.replicas(&ServiceId::new("blob")).len(), 5);
        }
    }

    #[test]
    fn swarm_single_downloader_is_direct() {
        let (mut s, mut dsr, h) = swarm_setup(1, 5);
        let rep = swarm_fetch(&mut s, &mut dsr, h, &ids(&[1]), FetchMode::Swarm, None).unwrap();
        assert_eq!(rep.seed_uploads, 5);
        assert_eq!(rep.uploads.len(), 5);
    }

    proptest! {
        #[test]
        fn swarm_seed_bound_is_exact(d in 1usize..7, c in 1usize..9) {
            let (mut s, mut dsr, h) = swarm_setup(d, c);
            let req: Vec<NodeId> = (1..=d as u32).map(NodeId).collect();
            let rep = swarm_fetch(&mut s, &mut dsr, h, &req, FetchMode::Swarm, None).unwrap();
            prop_assert_eq!(rep.seed_uploads, c);
            prop_assert_eq!(rep.uploads.len(), c * d);
        }
    }

    #[test]
    fn swarm_errors() {
        let (mut s, mut dsr, h) = swarm_setup(2, 3);
        let err = swarm_fetch(&mut s, &mut dsr, h, &ids(&[1]), FetchMode::Swarm, Some((NodeId(1), 0))).unwrap_err();
        assert!(matches!(err, ServiceError::HashMismatch { .. }));
        s.inject_fault(Fault::Crash(NodeId(0))).unwrap();
        assert_eq!(
            swarm_fetch(&mut s, &mut dsr, h, &ids(&[2]), FetchMode::Swarm, None),
            Err(ServiceError::NoReplicaOnline)
        );
    }

    #[test]
    fn instantiation_rules() {
        let (mut s, mut dsr, _) = swarm_setup(6, 4);
        let id = ServiceId::new("blob");
        let cap = Capacity::default();
        let before = s.trace().count_tag("UPLOAD");
        dsr.instantiate(&mut s, &id, NodeId(0), cap).unwrap();
        assert_eq!(s.trace().count_tag("UPLOAD"), before);
        let targets: Vec<(NodeId, Capacity)> = (1..=5).map(|i| (NodeId(i), cap)).collect();
        let out = dsr.instantiate_many(&mut s, &id, &targets).unwrap();
        assert_eq!(out.len(), 5);
        let seed_uploads = s.trace().with_tag("UPLOAD").filter(|e| e.node == Some(NodeId(0))).count();
        assert_eq!(seed_uploads, 4);
        let weak = Capacity { compute_units: 0, ..cap };
        assert_eq!(
            dsr.instantiate(&mut s, &id, NodeId(6), weak),
            Err(ServiceError::UnsuitableNode(NodeId(6)))
        );
        for n in 0..=5 {
            s.inject_fault(Fault::Crash(NodeId(n))).unwrap();
        }
        assert_eq!(dsr.instantiate(&mut s, &id, NodeId(6), cap), Err(ServiceError::NoReplicaOnline));
    }

    #[test]
    fn no_demand_no_push() {
        let dsr = Dsr::new(1);
        assert!(place_push_pull(&dsr, &DemandStats::default(), SimTime(0), &PlacementConfig::default()).is_empty());
    }

    #[test]
    fn push_precedes_next_request() {
        let topo = generate_topology(TopologyKind::SmallWorld { k: 4, p: 0.1 }, 20, 2).unwrap();
        let mut w = Workload::generate(topo, 1, 0, 100, 50, 1);
        w.requests = (0..10)
            .map(|i| WorkloadRequest {
                at: SimTime(i * 10),
                node: NodeId(7),
                service: w.homes[0].0.clone(),
            })
            .collect();
        let t = w.run(PlacementPolicy::Hybrid, &PlacementConfig::default());
        let es = t.entries();
        let push = es.iter().position(|e| e.event == "PUSH").unwrap();
        let req_after: Vec<_> = es[push..].iter().filter(|e| e.event == "REQUEST").collect();
        assert_eq!(es[..push].iter().filter(|e| e.event == "REQUEST").count(), 5);
        assert!(req_after.iter().all(|e| e.field("hops") == Some("0")));
    }

    #[test]
    fn hybrid_never_slower_than_pull() {
        for seed in 0..5 {
            let topo = generate_topology(TopologyKind::SmallWorld { k: 4, p: 0.1 }, 40, seed).unwrap();
            let w = Workload::generate(topo, 6, 400, 4 * 3600, 50, seed);
            let cfg = PlacementConfig::default();
            let pull = mean_request_latency(&w.run(PlacementPolicy::PullOnly, &cfg)).unwrap();
            let hyb = mean_request_latency(&w.run(PlacementPolicy::Hybrid, &cfg)).unwrap();
            assert!(hyb <= pull, "seed {seed}: {hyb} > {pull}");
        }
    }
}
