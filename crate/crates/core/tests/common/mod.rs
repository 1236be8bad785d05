//! Random instances and brute-force oracles shared by the integration tests.
//! The oracles only read parent links, never the engine's own distance or
//! ancestor code.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, VecDeque};

use hierood::conditionals::ProbabilityStack;
use hierood::hierarchy::{AugmentedHierarchy, DepthClassIndex, Hierarchy, NodeId, RawNode};
use hierood::inference::PredictiveDistribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tree with `2..=max_nodes` nodes and depth at most `max_depth`.
/// Ids are sparse and shuffled so that id order differs from insertion order.
pub fn random_tree(rng: &mut ChaCha8Rng, max_nodes: usize, max_depth: usize) -> Hierarchy {
    let n = rng.random_range(2..=max_nodes);
    let mut ids: Vec<u32> = (0..(3 * n) as u32).collect();
    ids.shuffle(rng);
    ids.truncate(n);
    let mut depth = vec![0usize];
    let mut nodes = vec![RawNode::new(ids[0], "n0", None)];
    for i in 1..n {
        let open: Vec<usize> = (0..i).filter(|&j| depth[j] < max_depth).collect();
        let p = open[rng.random_range(0..open.len())];
        depth.push(depth[p] + 1);
        nodes.push(RawNode::new(ids[i], format!("n{i}"), Some(ids[p])));
    }
    nodes.shuffle(rng);
    Hierarchy::build(nodes).expect("random tree is valid")
}

/// Flavours of random probability stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackKind {
    /// Softmax of random logits; carries logits.
    Logits,
    /// Random simplex points with exact zeros; no logits.
    Sparse,
    /// One-hot rows; no logits.
    OneHot,
}

pub fn random_row(rng: &mut ChaCha8Rng, k: usize, kind: StackKind) -> Vec<f64> {
    match kind {
        StackKind::Logits => unreachable!("logit rows come from random_logits"),
        StackKind::Sparse => {
            let mut v: Vec<f64> = (0..k)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        0.0
                    } else {
                        -rng.random::<f64>().max(1e-300).ln()
                    }
                })
                .collect();
            if v.iter().all(|&x| x == 0.0) {
                v[rng.random_range(0..k)] = 1.0;
            }
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        }
        StackKind::OneHot => {
            let mut v = vec![0.0; k];
            v[rng.random_range(0..k)] = 1.0;
            v
        }
    }
}

pub fn random_stack(
    rng: &mut ChaCha8Rng,
    index: &DepthClassIndex,
    kind: StackKind,
) -> ProbabilityStack {
    let depths = 1..=index.max_depth();
    match kind {
        StackKind::Logits => {
            let scale = rng.random_range(0.1..20.0);
            let logits = depths
                .map(|d| {
                    (0..index.num_classes(d))
                        .map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0))
                        .collect()
                })
                .collect();
            ProbabilityStack::from_logits(logits)
        }
        _ => {
            let probs = depths
                .map(|d| random_row(rng, index.num_classes(d), kind))
                .collect();
            ProbabilityStack::new(probs, None).expect("valid rows")
        }
    }
}

/// Undirected adjacency built from the parent links of `h`.
pub fn adjacency(h: &Hierarchy) -> HashMap<NodeId, Vec<NodeId>> {
    let mut adj: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for n in h.raw_nodes() {
        adj.entry(n.id).or_default();
        if let Some(p) = n.parent {
            adj.entry(n.id).or_default().push(p);
            adj.entry(p).or_default().push(n.id);
        }
    }
    adj
}

/// Breadth-first distances from `src`.
pub fn bfs(adj: &HashMap<NodeId, Vec<NodeId>>, src: NodeId) -> HashMap<NodeId, u32> {
    let mut dist = HashMap::from([(src, 0u32)]);
    let mut q = VecDeque::from([src]);
    while let Some(u) = q.pop_front() {
        for &v in &adj[&u] {
            if !dist.contains_key(&v) {
                dist.insert(v, dist[&u] + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

/// All-pairs distances by repeated BFS.
pub fn all_pairs(h: &Hierarchy) -> HashMap<NodeId, HashMap<NodeId, u32>> {
    let adj = adjacency(h);
    h.nodes().iter().map(|&a| (a, bfs(&adj, a))).collect()
}

/// Ancestors of `a` including itself, from parent links.
pub fn ancestor_set(h: &Hierarchy, a: NodeId) -> BTreeSet<NodeId> {
    let parents: HashMap<NodeId, Option<NodeId>> = h
        .raw_nodes()
        .into_iter()
        .map(|n| (n.id, n.parent))
        .collect();
    let mut out = BTreeSet::new();
    let mut cur = Some(a);
    while let Some(c) = cur {
        out.insert(c);
        cur = parents[&c];
    }
    out
}

/// Depth from parent links.
pub fn depth_of(h: &Hierarchy, a: NodeId) -> usize {
    ancestor_set(h, a).len() - 1
}

/// Deepest common element of the two ancestor sets.
pub fn lca_oracle(h: &Hierarchy, a: NodeId, b: NodeId) -> NodeId {
    let common: Vec<NodeId> = ancestor_set(h, a)
        .intersection(&ancestor_set(h, b))
        .copied()
        .collect();
    *common
        .iter()
        .max_by_key(|&&c| depth_of(h, c))
        .expect("root is common")
}

/// Exhaustive argmin of expected distance with the documented tie rule:
/// within 1e-9 of the minimum, prefer the deeper node, then the smaller id.
pub fn min_expected_oracle(g: &AugmentedHierarchy, p: &PredictiveDistribution) -> (NodeId, f64) {
    let h = g.base();
    let dists = all_pairs(h);
    let scored: Vec<(NodeId, f64)> = h
        .nodes()
        .iter()
        .map(|&c| {
            let e: f64 = p
                .leaves()
                .iter()
                .zip(p.probs())
                .map(|(&l, &m)| m * dists[&c][&g.to_base(l)] as f64)
                .sum();
            (c, e)
        })
        .collect();
    let best = scored.iter().map(|&(_, e)| e).fold(f64::INFINITY, f64::min);
    scored
        .into_iter()
        .filter(|&(_, e)| e <= best + 1e-9)
        .min_by(|a, b| depth_of(h, b.0).cmp(&depth_of(h, a.0)).then(a.0.cmp(&b.0)))
        .expect("non-empty")
}

/// Expected distance of `node` under `p`, by BFS.
pub fn expected_distance_oracle(
    g: &AugmentedHierarchy,
    p: &PredictiveDistribution,
    node: NodeId,
) -> f64 {
    let d = bfs(&adjacency(g.base()), node);
    p.leaves()
        .iter()
        .zip(p.probs())
        .map(|(&l, &m)| m * d[&g.to_base(l)] as f64)
        .sum()
}

/// Random distribution over the leaves of `g` with dyadic masses, so sums
/// are exact and ties are common.
pub fn dyadic_masses(rng: &mut ChaCha8Rng, g: &AugmentedHierarchy) -> Vec<f64> {
    let n = g.leaves().len();
    let mut units = vec![0u32; n];
    for _ in 0..16 {
        let i = if rng.random_bool(0.5) {
            rng.random_range(0..n.min(3))
        } else {
            rng.random_range(0..n)
        };
        units[i] += 1;
    }
    units.into_iter().map(|u| u as f64 / 16.0).collect()
}
