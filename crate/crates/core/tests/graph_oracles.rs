mod common;

use std::collections::BTreeSet;

use dbe_core::identity::TrustGraph;
use dbe_core::simnet::topology::{generate_topology, Topology, TopologyKind};
use dbe_core::simnet::NodeId;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn trust_scores_match_path_enumeration_on_500_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..500 {
        let n = rng.gen_range(2..=10);
        let density = rng.gen_range(0.1..0.7);
        let mut g = TrustGraph::with_nodes((0..n as u32).map(NodeId));
        let mut adj = vec![vec![0.0; n]; n];
        for (a, row) in adj.iter_mut().enumerate() {
            for (b, w) in row.iter_mut().enumerate() {
                if a != b && rng.gen_bool(density) {
                    *w = (rng.gen_range(1..=100) as f64) / 100.0;
                    g.attest(NodeId(a as u32), NodeId(b as u32), *w).unwrap();
                }
            }
        }
        let depth = rng.gen_range(1..=4);
        for a in 0..n {
            for b in 0..n {
                let got = g.trust_path_score(NodeId(a as u32), NodeId(b as u32), depth);
                let want = common::best_path(&adj, a, b, depth);
                assert!((got - want).abs() <= 1e-12, "{a}->{b} depth {depth}: {got} vs {want}");
            }
        }
    }
}

fn edge_set(t: &Topology) -> BTreeSet<(u32, u32)> {
    t.edges().collect()
}

fn oracle_clustering(n: usize, e: &BTreeSet<(u32, u32)>) -> f64 {
    let has = |a: u32, b: u32| e.contains(&(a.min(b), a.max(b)));
    let mut total = 0.0;
    for v in 0..n as u32 {
        let nb: Vec<u32> = (0..n as u32).filter(|&u| u != v && has(u, v)).collect();
        if nb.len() < 2 {
            continue;
        }
        let mut tri = 0;
        for &a in &nb {
            for &b in &nb {
                if a < b && has(a, b) {
                    tri += 1;
                }
            }
        }
        total += 2.0 * tri as f64 / (nb.len() * (nb.len() - 1)) as f64;
    }
    total / n as f64
}

/// Floyd-Warshall over connected ordered pairs.
fn oracle_path_length(n: usize, e: &BTreeSet<(u32, u32)>) -> f64 {
    const INF: usize = usize::MAX / 4;
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in e {
        d[a as usize][b as usize] = 1;
        d[b as usize][a as usize] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    let (mut sum, mut pairs) = (0usize, 0usize);
    for (i, row) in d.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            if i != j && x < INF {
                sum += x;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum as f64 / pairs as f64
    }
}

fn kind() -> impl Strategy<Value = TopologyKind> {
    prop_oneof![
        Just(TopologyKind::Keystone),
        Just(TopologyKind::Complete),
        (0.0f64..1.0).prop_map(|q| TopologyKind::Random { q }),
        (1usize..3, 0.0f64..1.0).prop_map(|(h, p)| TopologyKind::SmallWorld { k: 2 * h, p }),
    ]
}

proptest! {
    #[test]
    fn graph_statistics_match_brute_force(kind in kind(), n in 6usize..25, seed in any::<u64>()) {
        let t = generate_topology(kind, n, seed).unwrap();
        let e = edge_set(&t);
        prop_assert!((t.clustering_coefficient() - oracle_clustering(n, &e)).abs() < 1e-12);
        prop_assert!((t.characteristic_path_length() - oracle_path_length(n, &e)).abs() < 1e-12);
    }
}

#[test]
fn small_world_sits_between_lattice_and_random() {
    let n = 200;
    let lattice = generate_topology(TopologyKind::SmallWorld { k: 6, p: 0.0 }, n, 1).unwrap();
    let sw = generate_topology(TopologyKind::SmallWorld { k: 6, p: 0.05 }, n, 1).unwrap();
    let random = generate_topology(TopologyKind::Random { q: 6.0 / (n as f64 - 1.0) }, n, 1).unwrap();
    assert!((lattice.clustering_coefficient() - 0.6).abs() < 1e-12);
    assert!(sw.clustering_coefficient() > 2.0 * random.clustering_coefficient());
    assert!(sw.characteristic_path_length() < 0.5 * lattice.characteristic_path_length());
}
