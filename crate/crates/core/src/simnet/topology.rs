//! Business-network topology generators: keystone star, small-world ring
//! lattice with rewiring, and uniform random graphs.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TopologyKind {
    /// One hub surrounded by leaves.
    Keystone,
    /// Ring lattice with even degree `k`, each edge rewired with probability `p`.
    SmallWorld { k: usize, p: f64 },
    /// Each pair connected independently with probability `q`.
    Random { q: f64 },
    /// Every pair connected.
    Complete,
}

/// Undirected simple graph over nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    edges: BTreeSet<(u32, u32)>,
    adj: Vec<BTreeSet<u32>>,
}

fn norm(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Topology {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            edges: BTreeSet::new(),
            adj: vec![BTreeSet::new(); n],
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: u32, b: u32) -> bool {
        self.edges.contains(&norm(a, b))
    }

    pub fn add_edge(&mut self, a: u32, b: u32) -> bool {
        if a == b || a as usize >= self.n || b as usize >= self.n {
            return false;
        }
        if self.edges.insert(norm(a, b)) {
            self.adj[a as usize].insert(b);
            self.adj[b as usize].insert(a);
            true
        } else {
            false
        }
    }

    pub fn remove_edge(&mut self, a: u32, b: u32) -> bool {
        if self.edges.remove(&norm(a, b)) {
            self.adj[a as usize].remove(&b);
            self.adj[b as usize].remove(&a);
            true
        } else {
            false
        }
    }

    pub fn neighbors(&self, v: u32) -> impl Iterator<Item = u32> + '_ {
        self.adj[v as usize].iter().copied()
    }

    pub fn degree(&self, v: u32) -> usize {
        self.adj[v as usize].len()
    }

    /// BFS hop distances from `src`; `None` for unreachable nodes.
    pub fn distances_from(&self, src: u32) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        let mut q = VecDeque::from([src]);
        dist[src as usize] = Some(0);
        while let Some(v) = q.pop_front() {
            let d = dist[v as usize].unwrap_or(0);
            for w in self.neighbors(v) {
                if dist[w as usize].is_none() {
                    dist[w as usize] = Some(d + 1);
                    q.push_back(w);
                }
            }
        }
        dist
    }

    /// Mean local clustering coefficient; nodes of degree < 2 contribute 0.
    pub fn clustering_coefficient(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let total: f64 = (0..self.n as u32)
            .map(|v| {
                let nb: Vec<u32> = self.neighbors(v).collect();
                let k = nb.len();
                if k < 2 {
                    return 0.0;
                }
                let mut links = 0usize;
                for (i, &a) in nb.iter().enumerate() {
                    for &b in &nb[i + 1..] {
                        if self.has_edge(a, b) {
                            links += 1;
                        }
                    }
                }
                2.0 * links as f64 / (k * (k - 1)) as f64
            })
            .sum();
        total / self.n as f64
    }

    /// Mean shortest-path length over connected ordered pairs.
    pub fn characteristic_path_length(&self) -> f64 {
        let mut sum = 0usize;
        let mut pairs = 0usize;
        for v in 0..self.n as u32 {
            for (w, d) in self.distances_from(v).into_iter().enumerate() {
                if w as u32 != v {
                    if let Some(d) = d {
                        sum += d;
                        pairs += 1;
                    }
                }
            }
        }
        if pairs == 0 {
            0.0
        } else {
            sum as f64 / pairs as f64
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<(), SimError> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(SimError::BadParams(format!("{name}={p} outside [0,1]")));
    }
    Ok(())
}

pub fn generate_topology(kind: TopologyKind, n: usize, seed: u64) -> Result<Topology, SimError> {
    if n < 2 {
        return Err(SimError::BadParams(format!("node count {n} < 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Topology::empty(n);
    match kind {
        TopologyKind::Keystone => {
            for leaf in 1..n as u32 {
                g.add_edge(0, leaf);
            }
        }
        TopologyKind::Complete => {
            for a in 0..n as u32 {
                for b in a + 1..n as u32 {
                    g.add_edge(a, b);
                }
            }
        }
        TopologyKind::Random { q } => {
            check_prob("q", q)?;
            for a in 0..n as u32 {
                for b in a + 1..n as u32 {
                    if rng.gen_bool(q) {
                        g.add_edge(a, b);
                    }
                }
            }
        }
        TopologyKind::SmallWorld { k, p } => {
            check_prob("p", p)?;
            if k >= n || k % 2 != 0 || k == 0 {
                return Err(SimError::BadParams(format!("small-world degree k={k} must be even, >0 and < n={n}")));
            }
            let half = k / 2;
            for i in 0..n {
                for j in 1..=half {
                    g.add_edge(i as u32, ((i + j) % n) as u32);
                }
            }
            // Rewire each lattice edge (i, i+j) by moving its far end.
            for j in 1..=half {
                for i in 0..n {
                    let a = i as u32;
                    let b = ((i + j) % n) as u32;
                    if !rng.gen_bool(p) || !g.has_edge(a, b) {
                        continue;
                    }
                    if g.degree(a) >= n - 1 {
                        continue;
                    }
                    let c = loop {
                        let c = rng.gen_range(0..n as u32);
                        if c != a && !g.has_edge(a, c) {
                            break c;
                        }
                    };
                    g.remove_edge(a, b);
                    g.add_edge(a, c);
                }
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keystone_is_a_star() {
        let g = generate_topology(TopologyKind::Keystone, 5, 0).unwrap();
        assert_eq!(g.edge_count(), 4);
        assert_eq!(g.degree(0), 4);
        assert!((1..5).all(|v| g.degree(v) == 1));
    }

    #[test]
    fn unrewired_small_world_is_ring_lattice() {
        let g = generate_topology(TopologyKind::SmallWorld { k: 4, p: 0.0 }, 10, 3).unwrap();
        assert_eq!(g.edge_count(), 20);
        for v in 0..10u32 {
            assert_eq!(g.degree(v), 4);
            assert!(g.has_edge(v, (v + 1) % 10));
            assert!(g.has_edge(v, (v + 2) % 10));
        }
    }

    #[test]
    fn rewiring_preserves_edge_count() {
        let g = generate_topology(TopologyKind::SmallWorld { k: 6, p: 0.3 }, 50, 11).unwrap();
        assert_eq!(g.edge_count(), 150);
    }

    #[test]
    fn bad_params() {
        assert!(generate_topology(TopologyKind::SmallWorld { k: 10, p: 0.1 }, 10, 0).is_err());
        assert!(generate_topology(TopologyKind::SmallWorld { k: 3, p: 0.1 }, 10, 0).is_err());
        assert!(generate_topology(TopologyKind::SmallWorld { k: 4, p: 1.5 }, 10, 0).is_err());
        assert!(generate_topology(TopologyKind::Random { q: -0.1 }, 10, 0).is_err());
        assert!(generate_topology(TopologyKind::Keystone, 1, 0).is_err());
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_topology(TopologyKind::Random { q: 0.2 }, 30, 9).unwrap();
        let b = generate_topology(TopologyKind::Random { q: 0.2 }, 30, 9).unwrap();
        assert_eq!(a, b);
    }
}
