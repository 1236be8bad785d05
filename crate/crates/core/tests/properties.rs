mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use common::*;
use hierood::conditionals::{
    comp_prob_score, conditional_for, entropy_score, ConditionalModel, ConditionalTable,
    NodeConditional, ProbabilityStack,
};
use hierood::hierarchy::{split_id_ood, Hierarchy, NodeId, SplitSpec};
use hierood::inference::{
    path_mass, predict_argmax, predict_min_expected_dist, Engine, PredictiveDistribution,
};
use hierood::metrics::{balanced_accuracy, bmhd, lca_decompose, node_local_metrics, LcaKind};
use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

const MODELS: [ConditionalModel; 5] = ConditionalModel::ALL;

fn kinds_for(model: ConditionalModel) -> &'static [StackKind] {
    if model == ConditionalModel::CompLogits {
        &[StackKind::Logits]
    } else {
        &[StackKind::Logits, StackKind::Sparse, StackKind::OneHot]
    }
}

fn check_distribution(cond: &NodeConditional) -> Result<(), TestCaseError> {
    prop_assert!((cond.total() - 1.0).abs() <= 1e-9, "sum {}", cond.total());
    prop_assert!(cond.ood >= 0.0);
    prop_assert!(cond.child_probs.iter().all(|&p| p >= 0.0));
    Ok(())
}

/// Random split of `h` whose ID tree is non-empty.
fn random_split_spec(rng: &mut rand_chacha::ChaCha8Rng, h: &Hierarchy) -> SplitSpec {
    let mut candidates: Vec<NodeId> = h
        .nodes()
        .iter()
        .copied()
        .filter(|&c| c != h.root())
        .collect();
    candidates.shuffle(rng);
    let want = rng.random_range(0..=candidates.len().min(4));
    let mut chosen: Vec<NodeId> = Vec::new();
    for c in candidates {
        if chosen.len() == want {
            break;
        }
        let nested = chosen
            .iter()
            .any(|&o| ancestor_set(h, c).contains(&o) || ancestor_set(h, o).contains(&c));
        if !nested {
            chosen.push(c);
        }
    }
    SplitSpec::new(chosen)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dist_is_a_metric_matching_bfs(seed in any::<u64>()) {
        let h = random_tree(&mut rng(seed), 50, 6);
        let oracle = all_pairs(&h);
        let nodes = h.nodes();
        for &a in nodes {
            prop_assert_eq!(h.dist(a, a).unwrap(), 0);
            for &b in nodes {
                let ab = h.dist(a, b).unwrap();
                prop_assert_eq!(ab, oracle[&a][&b]);
                prop_assert_eq!(ab, h.dist(b, a).unwrap());
                for &c in nodes {
                    prop_assert!(h.dist(a, c).unwrap() <= ab + h.dist(b, c).unwrap());
                }
            }
        }
    }

    #[test]
    fn lca_matches_ancestor_intersection(seed in any::<u64>()) {
        let mut r = rng(seed);
        let h = random_tree(&mut r, 200, 8);
        for _ in 0..200 {
            let a = *h.nodes().choose(&mut r).unwrap();
            let b = *h.nodes().choose(&mut r).unwrap();
            prop_assert_eq!(h.lca(a, b).unwrap(), lca_oracle(&h, a, b));
        }
    }

    #[test]
    fn remap_composes(seed in any::<u64>()) {
        let h = random_tree(&mut rng(seed), 80, 6);
        let big_d = h.max_depth();
        for y in h.leaves() {
            prop_assert_eq!(h.remap_label(y, big_d).unwrap(), y);
            for d in 1..=big_d + 1 {
                let inner = h.remap_label(y, d).unwrap();
                for d2 in 1..=big_d + 1 {
                    prop_assert_eq!(
                        h.ancestor_at_depth(inner, d2).unwrap(),
                        h.remap_label(y, d.min(d2)).unwrap()
                    );
                }
            }
        }
    }

    #[test]
    fn split_leaves_no_single_child_chains(seed in any::<u64>()) {
        let mut r = rng(seed);
        let full = random_tree(&mut r, 60, 5);
        let spec = random_split_spec(&mut r, &full);
        let Ok(split) = split_id_ood(&full, &spec) else {
            // Only possible when every leaf was held out.
            let held: BTreeSet<NodeId> = spec.ood_roots.iter()
                .flat_map(|&c| full.descendant_leaves(c).unwrap()).collect();
            prop_assert_eq!(held.len(), full.num_leaves());
            return Ok(());
        };
        let id = &split.id_tree;
        for &c in id.nodes() {
            if c != id.root() {
                prop_assert_ne!(id.children(c).unwrap().len(), 1);
            }
        }
        let held: BTreeSet<NodeId> = spec.ood_roots.iter()
            .flat_map(|&c| full.descendant_leaves(c).unwrap()).collect();
        prop_assert_eq!(split.ood_label_map.keys().copied().collect::<BTreeSet<_>>(), held.clone());
        let kept: BTreeSet<NodeId> = id.leaves().collect();
        let all: BTreeSet<NodeId> = full.leaves().collect();
        prop_assert_eq!(kept.union(&held).copied().collect::<BTreeSet<_>>(), all);
        for (&leaf, &target) in &split.ood_label_map {
            prop_assert!(id.contains(target));
            prop_assert!(ancestor_set(&full, leaf).contains(&target));
            // No surviving node lies strictly between the leaf and its target.
            let depth_t = depth_of(&full, target);
            for a in ancestor_set(&full, leaf) {
                if depth_of(&full, a) > depth_t {
                    prop_assert!(!id.contains(a));
                }
            }
        }
    }

    #[test]
    fn augment_preserves_distances(seed in any::<u64>()) {
        let h = random_tree(&mut rng(seed), 60, 5);
        let g = h.augment();
        prop_assert_eq!(g.leaves().len(), h.num_leaves() + h.num_internal());
        prop_assert_eq!(g.num_ood(), h.num_internal());
        let base: BTreeSet<NodeId> = h.nodes().iter().copied().collect();
        let mut adj: HashMap<NodeId, Vec<NodeId>> = adjacency(&h);
        for c in h.internal_nodes() {
            let o = g.ood_child(c).unwrap();
            prop_assert!(!base.contains(&o));
            prop_assert_eq!(g.parent(o), Some(c));
            adj.entry(o).or_default().push(c);
            adj.get_mut(&c).unwrap().push(o);
        }
        for &a in h.nodes() {
            let d = bfs(&adj, a);
            for &b in h.nodes() {
                prop_assert_eq!(d[&b], h.dist(a, b).unwrap());
            }
        }
    }

    #[test]
    fn conditionals_are_distributions(seed in any::<u64>()) {
        let mut r = rng(seed);
        let h = random_tree(&mut r, 80, 5);
        let idx = h.depth_class_index();
        for model in MODELS {
            for &kind in kinds_for(model) {
                let stack = random_stack(&mut r, &idx, kind);
                for c in h.internal_nodes() {
                    let cond = conditional_for(&h, &idx, c, &stack, model).unwrap();
                    check_distribution(&cond)?;
                    if model == ConditionalModel::CompProb {
                        let children: f64 = cond.child_probs.iter().sum();
                        let s = comp_prob_score(&h, &idx, c, &stack).unwrap();
                        prop_assert!((s + children - 1.0).abs() <= 1e-12);
                    }
                }
                for root_ood in [false, true] {
                    let t = ConditionalTable::build(&h, &idx, &stack, model, root_ood).unwrap();
                    for cond in t.entries.values() {
                        check_distribution(cond)?;
                    }
                }
            }
        }
    }

    #[test]
    fn one_hot_child_gets_everything(seed in any::<u64>()) {
        let mut r = rng(seed);
        let h = random_tree(&mut r, 60, 5);
        let idx = h.depth_class_index();
        let internal: Vec<NodeId> = h.internal_nodes().collect();
        let c = *internal.choose(&mut r).unwrap();
        let children = h.children(c).unwrap();
        let target = *children.choose(&mut r).unwrap();
        let d = h.depth(c).unwrap() + 1;
        let probs: Vec<Vec<f64>> = (1..=idx.max_depth())
            .map(|dd| {
                let mut row = vec![0.0; idx.num_classes(dd)];
                let hot = if dd == d { target } else { idx.classes(dd)[0] };
                row[idx.column(dd, hot).unwrap()] = 1.0;
                row
            })
            .collect();
        let stack = ProbabilityStack::new(probs, None).unwrap();
        for model in &MODELS[..4] {
            let cond = conditional_for(&h, &idx, c, &stack, *model).unwrap();
            prop_assert_eq!(cond.ood, 0.0);
            prop_assert_eq!(cond.child_prob(target), Some(1.0));
        }
    }

    #[test]
    fn entropy_ignores_child_mass_scale(seed in any::<u64>(), k in 0.05f64..1.0) {
        let mut r = rng(seed);
        let h = random_tree(&mut r, 60, 5);
        let idx = h.depth_class_index();
        let internal: Vec<NodeId> = h.internal_nodes().filter(|&c| c != h.root()).collect();
        prop_assume!(!internal.is_empty());
        let c = *internal.choose(&mut r).unwrap();
        let d = h.depth(c).unwrap() + 1;
        let children = h.children(c).unwrap();
        let weights: Vec<f64> = children.iter().map(|_| r.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let stack_with = |mass: f64| {
            let probs: Vec<Vec<f64>> = (1..=idx.max_depth())
                .map(|dd| {
                    let n = idx.num_classes(dd);
                    if dd != d {
                        return vec![1.0 / n as f64; n];
                    }
                    let mut row = vec![0.0; n];
                    for (&ch, &w) in children.iter().zip(&weights) {
                        row[idx.column(dd, ch).unwrap()] = mass * w / total;
                    }
                    let rest = n - children.len();
                    for (i, v) in row.iter_mut().enumerate() {
                        if !children.contains(&idx.classes(dd)[i]) {
                            *v = (1.0 - mass) / rest as f64;
                        }
                    }
                    row
                })
                .collect();
            ProbabilityStack::new(probs, None).unwrap()
        };
        let full_mass = if idx.num_classes(d) == children.len() { 1.0 } else { 0.9 };
        let part = if full_mass == 1.0 { 1.0 } else { k * 0.9 };
        let a = entropy_score(&h, &idx, c, &stack_with(full_mass)).unwrap();
        let b = entropy_score(&h, &idx, c, &stack_with(part)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn predictive_mass_is_conserved(seed in any::<u64>()) {
        let mut r = rng(seed);
        let h = random_tree(&mut r, 120, 5);
        let engine = Engine::new(h);
        let g = engine.augmented();
        for model in MODELS {
            for &kind in kinds_for(model) {
                let stack = random_stack(&mut r, engine.index(), kind);
                for root_ood in [false, true] {
                    let table = engine.conditionals(&stack, model, root_ood).unwrap();
                    let p = PredictiveDistribution::build(g, &table).unwrap();
                    prop_assert!((p.total() - 1.0).abs() <= 1e-9);
                    prop_assert!(p.probs().iter().all(|&m| m >= 0.0));
                    for c in engine.hierarchy().internal_nodes() {
                        let by_path = path_mass(engine.hierarchy(), &table, c).unwrap();
                        let by_leaves = p.subtree_mass(g, c).unwrap();
                        prop_assert!((by_path - by_leaves).abs() <= 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn minexp_matches_exhaustive_search(seed in any::<u64>()) {
        let mut r = rng(seed);
        let h = random_tree(&mut r, 40, 5);
        let engine = Engine::new(h);
        let g = engine.augmented();
        let masses = dyadic_masses(&mut r, g);
        let p = PredictiveDistribution::from_masses(g, masses);
        let pred = predict_min_expected_dist(g, engine.distances(), &p);
        let (node, e) = min_expected_oracle(g, &p);
        prop_assert_eq!(pred.node, node);
        prop_assert!((pred.expected_dist.unwrap() - e).abs() <= 1e-12);
        let am = predict_argmax(g, &p);
        prop_assert!(e <= expected_distance_oracle(g, &p, am.node) + 1e-12);
    }

    #[test]
    fn lca_split_adds_up(seed in any::<u64>()) {
        let h = random_tree(&mut rng(seed), 40, 5);
        for &a in h.nodes() {
            for &b in h.nodes() {
                let d = lca_decompose(&h, a, b).unwrap();
                prop_assert_eq!(d.over + d.under, h.dist(a, b).unwrap());
                let expected = match (d.over, d.under) {
                    (0, 0) => LcaKind::Exact,
                    (_, 0) => LcaKind::PureOver,
                    (0, _) => LcaKind::PureUnder,
                    _ => LcaKind::Mixed,
                };
                prop_assert_eq!(d.kind, expected);
            }
        }
    }

    #[test]
    fn balanced_metrics_ignore_class_sizes(seed in any::<u64>(), copies in 1usize..5) {
        let mut r = rng(seed);
        let h = random_tree(&mut r, 40, 4);
        let nodes = h.nodes().to_vec();
        let n = r.random_range(5..40);
        let labels: Vec<NodeId> = (0..n).map(|_| *nodes.choose(&mut r).unwrap()).collect();
        let preds: Vec<NodeId> = (0..n).map(|_| *nodes.choose(&mut r).unwrap()).collect();
        let classes: BTreeSet<NodeId> = labels.iter().copied().collect();
        let dup = labels[0];
        let (mut l2, mut p2) = (labels.clone(), preds.clone());
        for _ in 0..copies {
            for i in 0..n {
                if labels[i] == dup {
                    l2.push(labels[i]);
                    p2.push(preds[i]);
                }
            }
        }
        let a = bmhd(&h, &preds, &labels, &classes).unwrap();
        let b = bmhd(&h, &p2, &l2, &classes).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        let a = balanced_accuracy(&preds, &labels, &classes).unwrap();
        let b = balanced_accuracy(&p2, &l2, &classes).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn dirty_f1_equals_f1_without_child_mistakes(seed in any::<u64>()) {
        let mut r = rng(seed);
        let h = random_tree(&mut r, 40, 4);
        let internal: Vec<NodeId> = h.internal_nodes().collect();
        let c = *internal.choose(&mut r).unwrap();
        let children = h.children(c).unwrap();
        let mut items: Vec<(NodeConditional, NodeId)> = Vec::new();
        for _ in 0..20 {
            let ood_label = r.random_bool(0.3);
            let label = if ood_label {
                c
            } else {
                let leaves = h.descendant_leaves(c).unwrap();
                *leaves.choose(&mut r).unwrap()
            };
            // Child scores always favour the correct child; OOD mass is random.
            let right = if ood_label { children[0] } else { h.child_toward(c, label).unwrap().unwrap() };
            let mut w: Vec<f64> = children.iter().map(|&ch| if ch == right { 0.5 } else { 0.1 }).collect();
            let ood = r.random_range(0.0..1.0);
            let s: f64 = w.iter().sum::<f64>() + ood;
            w.iter_mut().for_each(|x| *x /= s);
            items.push((NodeConditional { children: children.clone(), child_probs: w, ood: ood / s, degenerate: false }, label));
        }
        prop_assume!(items.iter().any(|(_, l)| *l == c));
        let m = node_local_metrics(&h, c, items.iter().map(|(cond, l)| (cond, *l))).unwrap();
        prop_assert_eq!(m.purity, 1.0);
        prop_assert_eq!(m.dirty_f1, m.f1);
    }

    #[test]
    fn ood_decision_is_scale_free(seed in any::<u64>(), k in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let n = r.random_range(1..6);
        let child: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let ood = r.random::<f64>();
        let a = NodeConditional { children: (0..n as u32).map(NodeId).collect(), child_probs: child.clone(), ood, degenerate: false };
        let b = NodeConditional { child_probs: child.iter().map(|x| x * k).collect(), ood: ood * k, ..a.clone() };
        prop_assert_eq!(a.predicts_ood(), b.predicts_ood());
        prop_assert_eq!(a.argmax_child().map(|x| x.0), b.argmax_child().map(|x| x.0));
    }
}

#[test]
fn split_label_map_targets_are_closest_survivors() {
    // Covered in the property above in aggregate; this pins one case by hand.
    let full = Hierarchy::build(vec![
        hierood::hierarchy::RawNode::new(0, "r", None),
        hierood::hierarchy::RawNode::new(1, "a", Some(0)),
        hierood::hierarchy::RawNode::new(2, "b", Some(0)),
        hierood::hierarchy::RawNode::new(3, "a1", Some(1)),
        hierood::hierarchy::RawNode::new(4, "a2", Some(1)),
        hierood::hierarchy::RawNode::new(5, "a3", Some(1)),
        hierood::hierarchy::RawNode::new(6, "b1", Some(2)),
        hierood::hierarchy::RawNode::new(7, "b2", Some(2)),
    ])
    .unwrap();
    let split = split_id_ood(&full, &SplitSpec::new([NodeId(5), NodeId(7)])).unwrap();
    let expected: BTreeMap<NodeId, NodeId> = [(NodeId(5), NodeId(1)), (NodeId(7), NodeId(0))]
        .into_iter()
        .collect();
    assert_eq!(split.ood_label_map, expected);
    assert_eq!(split.pruned, vec![NodeId(2)]);
}
