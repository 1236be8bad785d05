//! Gaussian stand-in for trained multi-depth networks.
//!
//! Class centroids follow the tree (children scatter around their parent with
//! a radius that shrinks with depth), samples are isotropic Gaussians around
//! leaf centroids, and each depth gets an equal-prior Gaussian classifier with
//! shared variance.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditionals::{ConditionalModel, ConditionalTable, ProbabilityStack};
use crate::hierarchy::{
    split_id_ood, DepthClassIndex, Hierarchy, HierarchyError, LabeledDataset, LabeledSample,
    NodeId, Partition, RawNode, Split, SplitSpec,
};
use crate::inference::{DecisionRule, Engine, InferenceError, Prediction};
use crate::metrics::{
    depth_accuracy_comparison, evaluate, DepthAccuracyComparison, EvalReport, MetricsError,
    NodeLocalSummary,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SyntheticError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("class {node} at depth {depth} has no training samples")]
    EmptyClass { depth: usize, node: NodeId },
    #[error("feature vector has {found} entries, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Shape of the generated tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeSpec {
    Balanced { depth: usize, branching: usize },
    Explicit { nodes: Vec<RawNode> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplesPerLeaf {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub tree: TreeSpec,
    pub feature_dim: usize,
    pub centroid_scale: f64,
    pub depth_decay: f64,
    pub noise_sigma: f64,
    pub samples_per_leaf: SamplesPerLeaf,
    /// Fraction of leaves to hold out; ignored when `ood_roots` is set.
    pub ood_fraction: f64,
    pub ood_roots: Option<Vec<NodeId>>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            tree: TreeSpec::Balanced {
                depth: 3,
                branching: 4,
            },
            feature_dim: 16,
            centroid_scale: 4.0,
            depth_decay: 0.7,
            noise_sigma: 1.0,
            samples_per_leaf: SamplesPerLeaf {
                train: 50,
                test: 20,
            },
            ood_fraction: 0.19,
            ood_roots: None,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: &str| Err(SyntheticError::ConfigInvalid(m.to_string()));
        if let TreeSpec::Balanced { depth, branching } = self.tree {
            if depth < 2 {
                return bad("depth must be at least 2");
            }
            if branching < 2 {
                return bad("branching must be at least 2");
            }
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive");
        }
        if !(self.depth_decay > 0.0 && self.depth_decay <= 1.0) {
            return bad("depth_decay must lie in (0, 1]");
        }
        if !(self.centroid_scale >= 0.0 && self.centroid_scale.is_finite()) {
            return bad("centroid_scale must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ood_fraction) {
            return bad("ood_fraction must lie in [0, 1)");
        }
        if self.samples_per_leaf.train == 0 || self.samples_per_leaf.test == 0 {
            return bad("samples_per_leaf counts must be positive");
        }
        Ok(())
    }

    fn build_tree(&self) -> Result<Hierarchy, SyntheticError> {
        match &self.tree {
            TreeSpec::Balanced { depth, branching } => Ok(balanced_tree(*depth, *branching)),
            TreeSpec::Explicit { nodes } => {
                let h = Hierarchy::build(nodes.clone())?;
                if h.max_depth() < 2 {
                    return Err(SyntheticError::ConfigInvalid(
                        "explicit tree must have depth at least 2".into(),
                    ));
                }
                Ok(h)
            }
        }
    }
}

/// Complete tree with ids in breadth-first order, root 0.
pub fn balanced_tree(depth: usize, branching: usize) -> Hierarchy {
    let mut nodes = vec![RawNode::new(0, "root", None)];
    let mut frontier = vec![0u32];
    let mut next = 1u32;
    for d in 1..=depth {
        let mut level = Vec::with_capacity(frontier.len() * branching);
        for &p in &frontier {
            for _ in 0..branching {
                nodes.push(RawNode::new(next, format!("d{d}_{next}"), Some(p)));
                level.push(next);
                next += 1;
            }
        }
        frontier = level;
    }
    Hierarchy::build(nodes).expect("balanced tree is valid")
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Picks held-out subtrees covering about `fraction` of the leaves.
///
/// Candidates sit at depth 2 or deeper so that every OOD label is a non-root
/// internal node, and every parent keeps at least two children.
fn choose_ood_roots(h: &Hierarchy, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<NodeId> {
    let mut budget = (fraction * h.num_leaves() as f64).round() as usize;
    let mut candidates: Vec<NodeId> = h
        .nodes()
        .iter()
        .copied()
        .filter(|&c| h.depth(c).expect("node") >= 2)
        .collect();
    candidates.shuffle(rng);
    let mut chosen: Vec<NodeId> = Vec::new();
    let mut removed_children: BTreeMap<NodeId, usize> = BTreeMap::new();
    for c in candidates {
        if budget == 0 {
            break;
        }
        let size = h.descendant_leaves(c).expect("node").len();
        if size > budget {
            continue;
        }
        let nested = chosen.iter().any(|&o| {
            h.is_ancestor_of(o, c).expect("node") || h.is_ancestor_of(c, o).expect("node")
        });
        if nested {
            continue;
        }
        let parent = h.parent(c).expect("node").expect("non-root");
        let siblings = h.children(parent).expect("node").len();
        let gone = removed_children.get(&parent).copied().unwrap_or(0);
        if siblings - gone - 1 < 2 {
            continue;
        }
        *removed_children.entry(parent).or_default() += 1;
        chosen.push(c);
        budget -= size;
    }
    chosen.sort();
    chosen
}

/// Output of [`generate`]. `features[i]` belongs to `dataset.samples[i]`.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub full: Hierarchy,
    pub split: Split,
    /// Labels refer to `split.id_tree`.
    pub dataset: LabeledDataset,
    pub features: Vec<Vec<f64>>,
    /// Centroids of every node of the full tree.
    pub centroids: BTreeMap<NodeId, Vec<f64>>,
}

impl SyntheticData {
    pub fn id_tree(&self) -> &Hierarchy {
        &self.split.id_tree
    }

    /// Indices of the samples in `p`.
    pub fn indices(&self, p: Partition) -> Vec<usize> {
        (0..self.dataset.len())
            .filter(|&i| self.dataset.samples[i].partition == p)
            .collect()
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData, SyntheticError> {
    cfg.validate()?;
    let full = cfg.build_tree()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut centroids: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    centroids.insert(full.root(), vec![0.0; cfg.feature_dim]);
    let mut order: Vec<NodeId> = full.nodes().to_vec();
    order.sort_by_key(|&c| (full.depth(c).expect("node"), c));
    for &c in order.iter().skip(1) {
        let parent = full.parent(c)?.expect("non-root");
        let radius = cfg.centroid_scale * cfg.depth_decay.powi(full.depth(parent)? as i32);
        let u = unit_vector(&mut rng, cfg.feature_dim);
        let base = &centroids[&parent];
        let mu = base.iter().zip(&u).map(|(b, x)| b + radius * x).collect();
        centroids.insert(c, mu);
    }

    let ood_roots = match &cfg.ood_roots {
        Some(r) => r.clone(),
        None => choose_ood_roots(&full, cfg.ood_fraction, &mut rng),
    };
    let split = split_id_ood(&full, &SplitSpec::new(ood_roots))?;

    let mut samples = Vec::new();
    let mut features = Vec::new();
    let mut draw = |rng: &mut ChaCha8Rng, leaf: NodeId, label: NodeId, p: Partition| {
        let mu = &centroids[&leaf];
        let x: Vec<f64> = mu
            .iter()
            .map(|m| m + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        samples.push(LabeledSample {
            sample_id: format!("s{:06}", samples.len()),
            label,
            partition: p,
        });
        features.push(x);
    };
    for leaf in full.leaves() {
        match split.ood_label_map.get(&leaf) {
            Some(&target) => {
                for _ in 0..cfg.samples_per_leaf.test {
                    draw(&mut rng, leaf, target, Partition::OodTest);
                }
            }
            None => {
                for _ in 0..cfg.samples_per_leaf.train {
                    draw(&mut rng, leaf, leaf, Partition::IdTrain);
                }
                for _ in 0..cfg.samples_per_leaf.test {
                    draw(&mut rng, leaf, leaf, Partition::IdTest);
                }
            }
        }
    }
    Ok(SyntheticData {
        full,
        split,
        dataset: LabeledDataset::new(samples),
        features,
        centroids,
    })
}

/// Gaussian class model for one depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthModel {
    pub classes: Vec<NodeId>,
    pub centroids: Vec<Vec<f64>>,
    /// Shared isotropic variance per coordinate.
    pub variance: f64,
}

impl DepthModel {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.centroids
            .iter()
            .map(|mu| {
                let sq: f64 = mu.iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum();
                -sq / (2.0 * self.variance)
            })
            .collect()
    }
}

/// One Gaussian classifier per depth of the ID tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiDepthClassifier {
    pub dim: usize,
    pub depths: Vec<DepthModel>,
}

const MIN_VARIANCE: f64 = 1e-12;

/// Fits class means and a shared variance per depth from leaf-labeled samples.
pub fn fit<'a>(
    h: &Hierarchy,
    index: &DepthClassIndex,
    train: impl IntoIterator<Item = (&'a [f64], NodeId)>,
) -> Result<MultiDepthClassifier, SyntheticError> {
    let train: Vec<(&[f64], NodeId)> = train.into_iter().collect();
    let dim = train.first().map_or(0, |(x, _)| x.len());
    if let Some((x, _)) = train.iter().find(|(x, _)| x.len() != dim) {
        return Err(SyntheticError::DimensionMismatch {
            expected: dim,
            found: x.len(),
        });
    }
    let mut depths = Vec::with_capacity(index.max_depth());
    for d in 1..=index.max_depth() {
        let k = index.num_classes(d);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        let mut cols = Vec::with_capacity(train.len());
        for &(x, y) in &train {
            let c = h.remap_label(y, d)?;
            let col = index
                .column(d, c)
                .ok_or(SyntheticError::EmptyClass { depth: d, node: c })?;
            counts[col] += 1;
            for (s, v) in sums[col].iter_mut().zip(x) {
                *s += v;
            }
            cols.push(col);
        }
        if let Some(i) = counts.iter().position(|&n| n == 0) {
            return Err(SyntheticError::EmptyClass {
                depth: d,
                node: index.classes(d)[i],
            });
        }
        let centroids: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
            .collect();
        let sq: f64 = train
            .iter()
            .zip(&cols)
            .map(|(&(x, _), &col)| {
                x.iter()
                    .zip(&centroids[col])
                    .map(|(v, m)| (v - m) * (v - m))
                    .sum::<f64>()
            })
            .sum();
        let variance = (sq / (train.len() * dim) as f64).max(MIN_VARIANCE);
        depths.push(DepthModel {
            classes: index.classes(d).to_vec(),
            centroids,
            variance,
        });
    }
    Ok(MultiDepthClassifier { dim, depths })
}

/// Per-depth posteriors and logits for one feature vector.
pub fn predict_stack(
    clf: &MultiDepthClassifier,
    x: &[f64],
) -> Result<ProbabilityStack, SyntheticError> {
    if x.len() != clf.dim {
        return Err(SyntheticError::DimensionMismatch {
            expected: clf.dim,
            found: x.len(),
        });
    }
    Ok(ProbabilityStack::from_logits(
        clf.depths.iter().map(|m| m.logits(x)).collect(),
    ))
}

/// A generated dataset with a fitted classifier and stacks for every test sample.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub data: SyntheticData,
    pub engine: Engine,
    pub classifier: MultiDepthClassifier,
    /// ID and OOD test samples in generation order.
    pub test: LabeledDataset,
    /// `stacks[i]` belongs to `test.samples[i]`.
    pub stacks: Vec<ProbabilityStack>,
}

impl Experiment {
    pub fn prepare(cfg: &SyntheticConfig) -> Result<Self, SyntheticError> {
        let data = generate(cfg)?;
        let engine = Engine::new(data.id_tree().clone());
        let train = data
            .indices(Partition::IdTrain)
            .into_iter()
            .map(|i| (data.features[i].as_slice(), data.dataset.samples[i].label));
        let classifier = fit(engine.hierarchy(), engine.index(), train)?;
        let mut test = Vec::new();
        let mut stacks = Vec::new();
        for (s, x) in data.dataset.samples.iter().zip(&data.features) {
            if s.partition == Partition::IdTrain {
                continue;
            }
            test.push(s.clone());
            stacks.push(predict_stack(&classifier, x)?);
        }
        Ok(Self {
            data,
            engine,
            classifier,
            test: LabeledDataset::new(test),
            stacks,
        })
    }

    pub fn labels(&self) -> Vec<NodeId> {
        self.test.samples.iter().map(|s| s.label).collect()
    }

    pub fn predictions(
        &self,
        model: ConditionalModel,
        rule: DecisionRule,
        root_ood: bool,
    ) -> Result<Vec<Prediction>, SyntheticError> {
        self.stacks
            .iter()
            .zip(&self.test.samples)
            .map(|(stack, s)| {
                Ok(self
                    .engine
                    .predict(stack, model, rule, root_ood, Some(s.label))?)
            })
            .collect()
    }

    pub fn conditional_tables(
        &self,
        model: ConditionalModel,
        root_ood: bool,
    ) -> Result<Vec<ConditionalTable>, SyntheticError> {
        self.stacks
            .iter()
            .map(|s| Ok(self.engine.conditionals(s, model, root_ood)?))
            .collect()
    }

    /// Report for one model and rule. Distribution-based rules also get node-local metrics.
    pub fn evaluate(
        &self,
        model: ConditionalModel,
        rule: DecisionRule,
        root_ood: bool,
    ) -> Result<EvalReport, SyntheticError> {
        let preds: Vec<NodeId> = self
            .predictions(model, rule, root_ood)?
            .into_iter()
            .map(|p| p.node)
            .collect();
        let mut report = evaluate(self.engine.hierarchy(), &preds, &self.test)?;
        if rule.uses_distribution() {
            let tables = self.conditional_tables(model, root_ood)?;
            report.node_local =
                NodeLocalSummary::compute(self.engine.hierarchy(), &tables, &self.labels())?;
        }
        Ok(report)
    }

    /// Depth-`d` classifiers vs the marginalized deepest classifier on OOD samples.
    pub fn depth_accuracy(&self) -> Result<DepthAccuracyComparison, SyntheticError> {
        Ok(depth_accuracy_comparison(
            self.engine.hierarchy(),
            self.engine.index(),
            &self.stacks,
            &self.labels(),
        )?)
    }

    /// OOD labels that occur in the test set.
    pub fn ood_classes(&self) -> BTreeSet<NodeId> {
        self.test
            .partition(Partition::OodTest)
            .map(|s| s.label)
            .collect()
    }
}

/// generate, split, fit, predict, evaluate.
pub fn run_experiment(
    cfg: &SyntheticConfig,
    model: ConditionalModel,
    rule: DecisionRule,
) -> Result<EvalReport, SyntheticError> {
    Experiment::prepare(cfg)?.evaluate(model, rule, false)
}
