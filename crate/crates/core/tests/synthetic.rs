use approx::assert_abs_diff_eq;
use hierood::conditionals::{conditional_for, ConditionalModel};
use hierood::hierarchy::Partition;
use hierood::inference::DecisionRule;
use hierood::synthetic::{
    generate, predict_stack, DepthModel, Experiment, MultiDepthClassifier, SamplesPerLeaf,
    SyntheticConfig,
};

fn small(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        samples_per_leaf: SamplesPerLeaf { train: 12, test: 5 },
        ..SyntheticConfig::with_seed(seed)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn same_seed_same_data() {
    let a = generate(&small(11)).unwrap();
    let b = generate(&small(11)).unwrap();
    assert_eq!(a.features, b.features);
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.centroids, b.centroids);
    assert_eq!(a.split.ood_label_map, b.split.ood_label_map);
    let c = generate(&small(12)).unwrap();
    assert_ne!(a.features, c.features);
}

#[test]
fn sibling_leaves_sit_closer_than_cousins() {
    let data = generate(&small(4)).unwrap();
    let h = &data.full;
    let leaves: Vec<_> = h.leaves().collect();
    let (mut sib, mut sib_n, mut other, mut other_n) = (0.0, 0usize, 0.0, 0usize);
    for (i, &a) in leaves.iter().enumerate() {
        for &b in &leaves[i + 1..] {
            let d = sq_dist(&data.centroids[&a], &data.centroids[&b]);
            if h.parent(a).unwrap() == h.parent(b).unwrap() {
                sib += d;
                sib_n += 1;
            } else {
                other += d;
                other_n += 1;
            }
        }
    }
    assert!(sib / (sib_n as f64) < other / (other_n as f64));
}

#[test]
fn ood_samples_only_in_test() {
    let data = generate(&small(2)).unwrap();
    let h = data.id_tree();
    for s in &data.dataset.samples {
        match s.partition {
            Partition::OodTest => assert!(!h.is_leaf(s.label).unwrap()),
            _ => assert!(h.is_leaf(s.label).unwrap()),
        }
    }
}

#[test]
fn flat_posteriors_give_maximal_uncertainty_ood() {
    let exp = Experiment::prepare(&small(5)).unwrap();
    let h = exp.engine.hierarchy();
    let index = exp.engine.index();
    // True centroids with a huge variance: every posterior is almost uniform.
    let clf = MultiDepthClassifier {
        dim: exp.classifier.dim,
        depths: (1..=index.max_depth())
            .map(|d| DepthModel {
                classes: index.classes(d).to_vec(),
                centroids: index
                    .classes(d)
                    .iter()
                    .map(|c| exp.data.centroids[c].clone())
                    .collect(),
                variance: 1e12,
            })
            .collect(),
    };
    for x in exp.data.features.iter().take(20) {
        let stack = predict_stack(&clf, x).unwrap();
        for c in h.internal_nodes() {
            let d = h.depth(c).unwrap() + 1;
            let k = h.children(c).unwrap().len() as f64;
            let m = index.num_classes(d) as f64;
            let limit = (k.ln() + 1.0 - k / m) / (k.ln() + 1.0);
            let cond = conditional_for(h, index, c, &stack, ConditionalModel::EntCompProb).unwrap();
            assert_abs_diff_eq!(cond.ood, limit, epsilon = 1e-6);
        }
    }
}

#[test]
fn report_invariants() {
    let exp = Experiment::prepare(&small(1)).unwrap();
    for rule in DecisionRule::ALL {
        let r = exp
            .evaluate(ConditionalModel::EntCompProb, rule, false)
            .unwrap();
        assert_abs_diff_eq!(r.mix_bmhd, (r.bmhd_id + r.bmhd_ood) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.mix_bacc, (r.bacc_id + r.bacc_ood) / 2.0, epsilon = 1e-12);
        assert_eq!(r.lca_histogram_id.total(), r.num_id_samples);
        assert_eq!(r.lca_histogram_ood.total(), r.num_ood_samples);
        assert_eq!(r.num_id_samples + r.num_ood_samples, exp.test.len());
        assert_eq!(r.node_local.is_some(), rule.uses_distribution());
        for v in [r.bacc_id, r.bacc_ood] {
            assert!((0.0..=100.0).contains(&v));
        }
        if let Some(nl) = &r.node_local {
            for m in &nl.nodes {
                for v in [m.f1, m.fpr, m.tpr, m.purity, m.dirty_f1] {
                    assert!((0.0..=1.0).contains(&v), "{m:?}");
                }
            }
        }
    }
}

#[test]
fn leaf_model_never_predicts_internal() {
    let exp = Experiment::prepare(&small(3)).unwrap();
    let h = exp.engine.hierarchy();
    let preds = exp
        .predictions(ConditionalModel::CompProb, DecisionRule::Leaf, false)
        .unwrap();
    assert!(preds.iter().all(|p| h.is_leaf(p.node).unwrap()));
    let r = exp
        .evaluate(ConditionalModel::CompProb, DecisionRule::Leaf, false)
        .unwrap();
    assert_eq!(r.bacc_ood, 0.0);
}

#[test]
fn oracle_beats_leaf_model() {
    let exp = Experiment::prepare(&small(0)).unwrap();
    let oracle = exp
        .evaluate(ConditionalModel::CompProb, DecisionRule::Oracle, false)
        .unwrap();
    let leaf = exp
        .evaluate(ConditionalModel::CompProb, DecisionRule::Leaf, false)
        .unwrap();
    assert!(oracle.mix_bmhd < leaf.mix_bmhd);
}
