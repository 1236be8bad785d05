//! Predictive distributions over the augmented tree and the decision rules
//! that turn them (or raw classifier outputs) into node predictions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditionals::{ConditionalError, ConditionalModel, ConditionalTable, ProbabilityStack};
use crate::hierarchy::{
    AugmentedHierarchy, DepthClassIndex, DistanceMatrix, Hierarchy, HierarchyError, NodeId,
};

/// Expected distances closer than this are treated as tied.
pub const EXPECTED_DIST_TIE_TOL: f64 = 1e-9;
/// Leaf masses closer than this are treated as tied by the argmax rule.
pub const MASS_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("no conditional for internal node {0}")]
    MissingConditional(NodeId),
    #[error("depth oracle has no classifier for root-labeled sample (label {0})")]
    RootDepthOracle(NodeId),
    #[error("depth oracle needs the true label")]
    MissingLabel,
    #[error(transparent)]
    Conditional(#[from] ConditionalError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

/// Final decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionRule {
    /// Minimize the expected hierarchical distance over all nodes.
    MinExp,
    /// Most probable leaf of the augmented tree.
    Argmax,
    /// Argmax of the deepest classifier; always a leaf.
    Leaf,
    /// Classifier at the ground-truth depth.
    Oracle,
}

impl DecisionRule {
    pub const ALL: [DecisionRule; 4] = [
        DecisionRule::MinExp,
        DecisionRule::Argmax,
        DecisionRule::Leaf,
        DecisionRule::Oracle,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DecisionRule::MinExp => "minexp",
            DecisionRule::Argmax => "argmax",
            DecisionRule::Leaf => "leaf",
            DecisionRule::Oracle => "oracle",
        }
    }

    /// Whether the rule reads the predictive distribution.
    pub fn uses_distribution(&self) -> bool {
        matches!(self, DecisionRule::MinExp | DecisionRule::Argmax)
    }
}

impl fmt::Display for DecisionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecisionRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown decision rule '{s}'"))
    }
}

/// Predicted node for one sample. `ood(c)` predictions are already mapped to `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub node: NodeId,
    pub rule: DecisionRule,
    /// Expected distance of `node` under the predictive distribution, when one was built.
    pub expected_dist: Option<f64>,
    /// Probability the model assigns to exactly this prediction.
    pub prob_mass: f64,
}

/// Distribution over the leaves of the augmented tree (`C^id ∪ C^ood`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    leaves: Vec<NodeId>,
    probs: Vec<f64>,
}

impl PredictiveDistribution {
    /// Chain-rule product of conditionals along every root-to-leaf path.
    pub fn build(g: &AugmentedHierarchy, table: &ConditionalTable) -> Result<Self, InferenceError> {
        let h = g.base();
        let mut probs = vec![0.0; g.leaves().len()];
        let mut stack = vec![(h.root(), 1.0f64)];
        while let Some((c, mass)) = stack.pop() {
            if h.is_leaf(c)? {
                probs[g.leaf_position(c).expect("base leaf")] = mass;
                continue;
            }
            let cond = table.get(c).ok_or(InferenceError::MissingConditional(c))?;
            for (&y, &p) in cond.children.iter().zip(&cond.child_probs) {
                stack.push((y, mass * p));
            }
            let ood = g.ood_child(c).expect("internal node has an ood child");
            probs[g.leaf_position(ood).expect("ood leaf")] = mass * cond.ood;
        }
        Ok(Self {
            leaves: g.leaves().to_vec(),
            probs,
        })
    }

    /// Builds a distribution from explicit leaf masses aligned with `g.leaves()`.
    pub fn from_masses(g: &AugmentedHierarchy, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), g.leaves().len(), "one mass per augmented leaf");
        Self {
            leaves: g.leaves().to_vec(),
            probs,
        }
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, leaf: NodeId) -> Option<f64> {
        self.leaves.binary_search(&leaf).ok().map(|i| self.probs[i])
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Mass per base node, with `ood(c)` folded onto `c`; indexed by base position.
    pub fn base_masses(&self, g: &AugmentedHierarchy) -> Vec<f64> {
        let h = g.base();
        let mut out = vec![0.0; h.len()];
        for (&l, &p) in self.leaves.iter().zip(&self.probs) {
            out[h.position(g.to_base(l)).expect("base node")] += p;
        }
        out
    }

    /// Total mass of the augmented leaves below base node `c`.
    pub fn subtree_mass(&self, g: &AugmentedHierarchy, c: NodeId) -> Result<f64, InferenceError> {
        let h = g.base();
        let mut total = 0.0;
        for (&l, &p) in self.leaves.iter().zip(&self.probs) {
            let anchor = match g.ood_owner(l) {
                Some(owner) => owner,
                None => l,
            };
            if h.is_ancestor_of(c, anchor)? {
                total += p;
            }
        }
        Ok(total)
    }
}

/// Probability of base node `c` as the product of conditionals from the root.
pub fn path_mass(
    h: &Hierarchy,
    table: &ConditionalTable,
    c: NodeId,
) -> Result<f64, InferenceError> {
    let path = h.ancestors(c)?;
    let mut mass = 1.0;
    for pair in path.windows(2) {
        let (child, parent) = (pair[0], pair[1]);
        let cond = table
            .get(parent)
            .ok_or(InferenceError::MissingConditional(parent))?;
        mass *= cond.child_prob(child).expect("child of its parent");
    }
    Ok(mass)
}

/// Expected distance of every base node as a prediction, indexed by base position.
pub fn expected_distances(
    g: &AugmentedHierarchy,
    dm: &DistanceMatrix,
    p: &PredictiveDistribution,
) -> Vec<f64> {
    let masses = p.base_masses(g);
    let support: Vec<(usize, f64)> = masses
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, m)| m != 0.0)
        .collect();
    (0..dm.len())
        .map(|c| {
            let row = dm.row(c);
            support.iter().map(|&(j, m)| row[j] as f64 * m).sum()
        })
        .collect()
}

/// Candidate minimizing the expected distance. Near-ties (within
/// [`EXPECTED_DIST_TIE_TOL`]) go to the deeper node, then the smaller id.
pub fn predict_min_expected_dist(
    g: &AugmentedHierarchy,
    dm: &DistanceMatrix,
    p: &PredictiveDistribution,
) -> Prediction {
    let h = g.base();
    let ed = expected_distances(g, dm, p);
    let best = ed.iter().copied().fold(f64::INFINITY, f64::min);
    let winner = (0..ed.len())
        .filter(|&c| ed[c] <= best + EXPECTED_DIST_TIE_TOL)
        .min_by_key(|&c| (std::cmp::Reverse(h.depth_pos(c)), h.node_at(c)))
        .expect("at least one candidate");
    let node = h.node_at(winner);
    Prediction {
        node,
        rule: DecisionRule::MinExp,
        expected_dist: Some(ed[winner]),
        prob_mass: exact_mass(g, p, node),
    }
}

fn exact_mass(g: &AugmentedHierarchy, p: &PredictiveDistribution, node: NodeId) -> f64 {
    let leaf = g.ood_child(node).unwrap_or(node);
    p.prob(leaf).unwrap_or(0.0)
}

/// Most probable augmented leaf, ties to the smaller id.
pub fn predict_argmax(g: &AugmentedHierarchy, p: &PredictiveDistribution) -> Prediction {
    let best = p.probs().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let i = p
        .probs()
        .iter()
        .position(|&m| m >= best - MASS_TIE_TOL)
        .expect("non-empty distribution");
    Prediction {
        node: g.to_base(p.leaves()[i]),
        rule: DecisionRule::Argmax,
        expected_dist: None,
        prob_mass: p.probs()[i],
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax of the deepest classifier.
pub fn predict_leaf_model(
    index: &DepthClassIndex,
    stack: &ProbabilityStack,
) -> Result<Prediction, InferenceError> {
    let d = index.max_depth();
    let row = stack.probs(d)?;
    let i = argmax(row);
    Ok(Prediction {
        node: index.classes(d)[i],
        rule: DecisionRule::Leaf,
        expected_dist: None,
        prob_mass: row[i],
    })
}

/// Argmax of the classifier at the depth of the true label (`D` for leaves).
pub fn predict_depth_oracle(
    h: &Hierarchy,
    index: &DepthClassIndex,
    stack: &ProbabilityStack,
    true_label: NodeId,
) -> Result<Prediction, InferenceError> {
    let d = if h.is_leaf(true_label)? {
        index.max_depth()
    } else {
        h.depth(true_label)?
    };
    if d == 0 {
        return Err(InferenceError::RootDepthOracle(true_label));
    }
    let row = stack.probs(d)?;
    let i = argmax(row);
    Ok(Prediction {
        node: index.classes(d)[i],
        rule: DecisionRule::Oracle,
        expected_dist: None,
        prob_mass: row[i],
    })
}

/// Depth-`d` class probabilities obtained by summing the deepest classifier's
/// leaf probabilities under each class; aligned with `index.classes(d)`.
pub fn marginalized_probs(
    h: &Hierarchy,
    index: &DepthClassIndex,
    stack: &ProbabilityStack,
    d: usize,
) -> Result<Vec<f64>, InferenceError> {
    let deepest = index.max_depth();
    if d == 0 || d > deepest {
        return Err(ConditionalError::MissingDepth(d).into());
    }
    let row = stack.probs(deepest)?;
    let mut out = vec![0.0; index.num_classes(d)];
    for (&leaf, &p) in index.classes(deepest).iter().zip(row) {
        let c = h.ancestor_at_depth(leaf, d)?;
        let col = index
            .column(d, c)
            .ok_or(ConditionalError::MissingClass { depth: d, node: c })?;
        out[col] += p;
    }
    Ok(out)
}

/// Argmax of [`marginalized_probs`].
pub fn marginalized_prediction(
    h: &Hierarchy,
    index: &DepthClassIndex,
    stack: &ProbabilityStack,
    d: usize,
) -> Result<NodeId, InferenceError> {
    let probs = marginalized_probs(h, index, stack, d)?;
    Ok(index.classes(d)[argmax(&probs)])
}

/// Everything needed to run inference on one hierarchy: the augmented tree,
/// the per-depth class index and the cached distance matrix.
#[derive(Debug, Clone)]
pub struct Engine {
    g: AugmentedHierarchy,
    index: DepthClassIndex,
    dm: DistanceMatrix,
}

impl Engine {
    pub fn new(h: Hierarchy) -> Self {
        let index = h.depth_class_index();
        let dm = DistanceMatrix::new(&h);
        Self {
            g: AugmentedHierarchy::new(h),
            index,
            dm,
        }
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        self.g.base()
    }

    pub fn augmented(&self) -> &AugmentedHierarchy {
        &self.g
    }

    pub fn index(&self) -> &DepthClassIndex {
        &self.index
    }

    pub fn distances(&self) -> &DistanceMatrix {
        &self.dm
    }

    pub fn conditionals(
        &self,
        stack: &ProbabilityStack,
        model: ConditionalModel,
        root_ood: bool,
    ) -> Result<ConditionalTable, InferenceError> {
        Ok(ConditionalTable::build(
            self.hierarchy(),
            &self.index,
            stack,
            model,
            root_ood,
        )?)
    }

    pub fn distribution(
        &self,
        stack: &ProbabilityStack,
        model: ConditionalModel,
        root_ood: bool,
    ) -> Result<PredictiveDistribution, InferenceError> {
        let table = self.conditionals(stack, model, root_ood)?;
        PredictiveDistribution::build(&self.g, &table)
    }

    /// Expected distance of `node` under `p`.
    pub fn expected_distance(&self, p: &PredictiveDistribution, node: NodeId) -> Option<f64> {
        let pos = self.hierarchy().position(node)?;
        let masses = p.base_masses(&self.g);
        let row = self.dm.row(pos);
        Some(masses.iter().zip(row).map(|(m, &d)| m * d as f64).sum())
    }

    /// Runs one decision rule. `true_label` is only read by the depth oracle.
    pub fn predict(
        &self,
        stack: &ProbabilityStack,
        model: ConditionalModel,
        rule: DecisionRule,
        root_ood: bool,
        true_label: Option<NodeId>,
    ) -> Result<Prediction, InferenceError> {
        stack.check_shape(&self.index)?;
        match rule {
            DecisionRule::MinExp => {
                let p = self.distribution(stack, model, root_ood)?;
                Ok(predict_min_expected_dist(&self.g, &self.dm, &p))
            }
            DecisionRule::Argmax => {
                let p = self.distribution(stack, model, root_ood)?;
                let mut pred = predict_argmax(&self.g, &p);
                pred.expected_dist = self.expected_distance(&p, pred.node);
                Ok(pred)
            }
            DecisionRule::Leaf => predict_leaf_model(&self.index, stack),
            DecisionRule::Oracle => {
                let label = true_label.ok_or(InferenceError::MissingLabel)?;
                predict_depth_oracle(self.hierarchy(), &self.index, stack, label)
            }
        }
    }
}
