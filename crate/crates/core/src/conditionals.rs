//! Node-local conditional distributions built from per-depth classifier outputs.
//!
//! For an internal node `c` at depth `k`, the classifier of depth `k + 1`
//! supplies probabilities for the children of `c`. A score model turns those
//! into a distribution over `Ch(c) ∪ {ood(c)}`:
//!
//! * `CompProb` keeps the child probabilities and assigns the complement
//!   `1 - Σ p(child)` to `ood(c)`.
//! * `Entropy`, `MaxProb` and `EntCompProb` compute an unnormalized OOD score
//!   `s(c)` and divide children and `s(c)` by `s(c) + Σ p(child)`.
//! * `CompLogits` applies a softmax to the child logits plus one extra logit
//!   equal to the plain sum of logits of all non-child classes.
//!
//! Entropies use the natural logarithm with `0 · log 0 = 0`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{DepthClassIndex, Hierarchy, HierarchyError, NodeId};

/// Row sums must match 1 within this tolerance in memory.
pub const PROB_SUM_TOL: f64 = 1e-6;
/// Entries below `-NEGATIVE_TOL` are rejected.
pub const NEGATIVE_TOL: f64 = 1e-12;
/// Child mass below this counts as zero.
pub const ZERO_MASS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConditionalError {
    #[error("missing probabilities for depth {0}")]
    MissingDepth(usize),
    #[error("missing logits for depth {0}")]
    MissingLogits(usize),
    #[error("node {0} is not an internal node")]
    NotInternal(NodeId),
    #[error("depth {depth}: expected {expected} entries, found {found}")]
    ShapeMismatch {
        depth: usize,
        expected: usize,
        found: usize,
    },
    #[error("depth {depth}: {reason}")]
    InvalidProbabilities { depth: usize, reason: String },
    #[error("depth {depth}: softmax of logits deviates from probabilities by {deviation:e}")]
    LogitMismatch { depth: usize, deviation: f64 },
    #[error("class {node} missing from the depth-{depth} class index")]
    MissingClass { depth: usize, node: NodeId },
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![1.0 / logits.len() as f64; logits.len()];
    }
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Shannon entropy (nats) of `p` after renormalizing it to sum to one.
pub fn entropy(p: &[f64]) -> f64 {
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let q = v / total;
            q * q.ln()
        })
        .sum::<f64>()
}

/// Per-depth classifier outputs for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityStack {
    probs: Vec<Vec<f64>>,
    logits: Option<Vec<Vec<f64>>>,
}

impl ProbabilityStack {
    /// Builds a stack for depths `1..=probs.len()`, checking the row invariants.
    pub fn new(
        probs: Vec<Vec<f64>>,
        logits: Option<Vec<Vec<f64>>>,
    ) -> Result<Self, ConditionalError> {
        for (i, row) in probs.iter().enumerate() {
            check_row(i + 1, row)?;
        }
        if let Some(logits) = &logits {
            if logits.len() != probs.len() {
                return Err(ConditionalError::MissingLogits(logits.len() + 1));
            }
            for (i, (l, p)) in logits.iter().zip(&probs).enumerate() {
                if l.len() != p.len() {
                    return Err(ConditionalError::ShapeMismatch {
                        depth: i + 1,
                        expected: p.len(),
                        found: l.len(),
                    });
                }
                let deviation = softmax(l)
                    .iter()
                    .zip(p)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if deviation > PROB_SUM_TOL {
                    return Err(ConditionalError::LogitMismatch {
                        depth: i + 1,
                        deviation,
                    });
                }
            }
        }
        Ok(Self { probs, logits })
    }

    /// Builds a stack whose probabilities are the softmax of `logits`.
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Self {
        let probs = logits.iter().map(|l| softmax(l)).collect();
        Self {
            probs,
            logits: Some(logits),
        }
    }

    /// Number of depths covered.
    pub fn max_depth(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self, d: usize) -> Result<&[f64], ConditionalError> {
        d.checked_sub(1)
            .and_then(|i| self.probs.get(i))
            .map(Vec::as_slice)
            .ok_or(ConditionalError::MissingDepth(d))
    }

    pub fn logits(&self, d: usize) -> Result<&[f64], ConditionalError> {
        self.logits
            .as_ref()
            .and_then(|l| d.checked_sub(1).and_then(|i| l.get(i)))
            .map(Vec::as_slice)
            .ok_or(ConditionalError::MissingLogits(d))
    }

    pub fn has_logits(&self) -> bool {
        self.logits.is_some()
    }

    /// Checks that every depth of `index` is present with the right width.
    pub fn check_shape(&self, index: &DepthClassIndex) -> Result<(), ConditionalError> {
        for d in 1..=index.max_depth() {
            let row = self.probs(d)?;
            if row.len() != index.num_classes(d) {
                return Err(ConditionalError::ShapeMismatch {
                    depth: d,
                    expected: index.num_classes(d),
                    found: row.len(),
                });
            }
        }
        Ok(())
    }
}

fn check_row(depth: usize, row: &[f64]) -> Result<(), ConditionalError> {
    if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < -NEGATIVE_TOL) {
        return Err(ConditionalError::InvalidProbabilities {
            depth,
            reason: format!("invalid entry {v}"),
        });
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(ConditionalError::InvalidProbabilities {
            depth,
            reason: format!("row sums to {sum}"),
        });
    }
    Ok(())
}

/// Rule turning classifier outputs into `p(y | c, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionalModel {
    CompProb,
    Entropy,
    MaxProb,
    EntCompProb,
    CompLogits,
}

impl ConditionalModel {
    pub const ALL: [ConditionalModel; 5] = [
        ConditionalModel::CompProb,
        ConditionalModel::Entropy,
        ConditionalModel::MaxProb,
        ConditionalModel::EntCompProb,
        ConditionalModel::CompLogits,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConditionalModel::CompProb => "compprob",
            ConditionalModel::Entropy => "entropy",
            ConditionalModel::MaxProb => "maxprob",
            ConditionalModel::EntCompProb => "entcompprob",
            ConditionalModel::CompLogits => "complogits",
        }
    }
}

impl fmt::Display for ConditionalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionalModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown score model '{s}'"))
    }
}

/// Children of internal node `c`, their column indices in the depth-`k+1`
/// index, and that depth.
fn child_columns(
    h: &Hierarchy,
    index: &DepthClassIndex,
    c: NodeId,
) -> Result<(Vec<NodeId>, Vec<usize>, usize), ConditionalError> {
    let children = h.children(c)?;
    if children.is_empty() {
        return Err(ConditionalError::NotInternal(c));
    }
    let d = h.depth(c)? + 1;
    if d > index.max_depth() {
        return Err(ConditionalError::MissingDepth(d));
    }
    let cols = children
        .iter()
        .map(|&y| {
            index
                .column(d, y)
                .ok_or(ConditionalError::MissingClass { depth: d, node: y })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((children, cols, d))
}

fn child_probs(
    h: &Hierarchy,
    index: &DepthClassIndex,
    c: NodeId,
    stack: &ProbabilityStack,
) -> Result<Vec<f64>, ConditionalError> {
    let (_, cols, d) = child_columns(h, index, c)?;
    let row = stack.probs(d)?;
    cols.iter()
        .map(|&i| row.get(i).copied().ok_or(ConditionalError::MissingDepth(d)))
        .collect()
}

fn comp_prob_of(children: &[f64]) -> f64 {
    (1.0 - children.iter().sum::<f64>()).max(0.0)
}

fn entropy_of(children: &[f64]) -> f64 {
    let total: f64 = children.iter().sum();
    if total < ZERO_MASS {
        (children.len() as f64).ln()
    } else {
        entropy(children)
    }
}

fn max_prob_of(children: &[f64]) -> f64 {
    1.0 - children.iter().copied().fold(0.0, f64::max)
}

/// Complementary probability `1 - Σ_{y ∈ Ch(c)} p(y | x)`, clamped at zero.
pub fn comp_prob_score(
    h: &Hierarchy,
    index: &DepthClassIndex,
    c: NodeId,
    stack: &ProbabilityStack,
) -> Result<f64, ConditionalError> {
    Ok(comp_prob_of(&child_probs(h, index, c, stack)?))
}

/// Entropy of the renormalized child distribution; `log |Ch(c)|` when the
/// children carry no mass.
pub fn entropy_score(
    h: &Hierarchy,
    index: &DepthClassIndex,
    c: NodeId,
    stack: &ProbabilityStack,
) -> Result<f64, ConditionalError> {
    Ok(entropy_of(&child_probs(h, index, c, stack)?))
}

/// `1 - max_{y ∈ Ch(c)} p(y | x)`.
pub fn maxprob_score(
    h: &Hierarchy,
    index: &DepthClassIndex,
    c: NodeId,
    stack: &ProbabilityStack,
) -> Result<f64, ConditionalError> {
    Ok(max_prob_of(&child_probs(h, index, c, stack)?))
}

/// Entropy plus complementary probability.
pub fn entcompprob_score(
    h: &Hierarchy,
    index: &DepthClassIndex,
    c: NodeId,
    stack: &ProbabilityStack,
) -> Result<f64, ConditionalError> {
    let p = child_probs(h, index, c, stack)?;
    Ok(entropy_of(&p) + comp_prob_of(&p))
}

/// Entropy of the deepest classifier's output, used as the root OOD score.
pub fn root_ood_score(stack: &ProbabilityStack) -> Result<f64, ConditionalError> {
    Ok(entropy(stack.probs(stack.max_depth())?))
}

/// `p(y | c, x)` for `y ∈ Ch(c) ∪ {ood(c)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConditional {
    /// Children of the node, ascending.
    pub children: Vec<NodeId>,
    /// Child probabilities.
    pub child_probs: Vec<f64>,
    /// Probability of `ood(c)`.
    pub ood: f64,
    /// Set when the normalizer vanished and a uniform fallback was used.
    pub degenerate: bool,
}

impl NodeConditional {
    fn normalized(children: Vec<NodeId>, child_mass: Vec<f64>, score: f64) -> Self {
        let denom = score + child_mass.iter().sum::<f64>();
        if denom < ZERO_MASS {
            let u = 1.0 / (child_mass.len() + 1) as f64;
            return Self {
                child_probs: vec![u; child_mass.len()],
                children,
                ood: u,
                degenerate: true,
            };
        }
        Self {
            child_probs: child_mass.iter().map(|p| p / denom).collect(),
            children,
            ood: score / denom,
            degenerate: false,
        }
    }

    pub fn total(&self) -> f64 {
        self.child_probs.iter().sum::<f64>() + self.ood
    }

    pub fn child_prob(&self, child: NodeId) -> Option<f64> {
        self.children
            .iter()
            .position(|&c| c == child)
            .map(|i| self.child_probs[i])
    }

    /// Most probable child (first on ties) and its probability.
    pub fn argmax_child(&self) -> Option<(NodeId, f64)> {
        let mut best: Option<(NodeId, f64)> = None;
        for (&c, &p) in self.children.iter().zip(&self.child_probs) {
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((c, p));
            }
        }
        best
    }

    /// True when `ood(c)` is strictly the largest entry; ties go to the child.
    pub fn predicts_ood(&self) -> bool {
        self.child_probs.iter().all(|&p| self.ood > p)
    }
}

/// Conditional distribution at internal node `c` under `model`.
pub fn conditional_for(
    h: &Hierarchy,
    index: &DepthClassIndex,
    c: NodeId,
    stack: &ProbabilityStack,
    model: ConditionalModel,
) -> Result<NodeConditional, ConditionalError> {
    let (children, cols, d) = child_columns(h, index, c)?;
    let row = stack.probs(d)?;
    let mass: Vec<f64> = cols.iter().map(|&i| row[i]).collect();
    let cond = match model {
        ConditionalModel::CompProb => {
            let ood = comp_prob_of(&mass);
            NodeConditional {
                children,
                child_probs: mass,
                ood,
                degenerate: false,
            }
        }
        ConditionalModel::Entropy => {
            let s = entropy_of(&mass);
            NodeConditional::normalized(children, mass, s)
        }
        ConditionalModel::MaxProb => {
            let s = max_prob_of(&mass);
            NodeConditional::normalized(children, mass, s)
        }
        ConditionalModel::EntCompProb => {
            let s = entropy_of(&mass) + comp_prob_of(&mass);
            NodeConditional::normalized(children, mass, s)
        }
        ConditionalModel::CompLogits => {
            let logits = stack.logits(d)?;
            let mut is_child = vec![false; logits.len()];
            for &i in &cols {
                is_child[i] = true;
            }
            // No classes outside the children means no complement to sum over,
            // so the OOD logit is -inf, matching CompProb's zero complement.
            let outside: Vec<f64> = logits
                .iter()
                .zip(&is_child)
                .filter(|(_, &ch)| !ch)
                .map(|(&l, _)| l)
                .collect();
            let ood_logit = if outside.is_empty() {
                f64::NEG_INFINITY
            } else {
                outside.iter().sum()
            };
            let mut z: Vec<f64> = cols.iter().map(|&i| logits[i]).collect();
            z.push(ood_logit);
            let mut p = softmax(&z);
            let ood = p.pop().expect("non-empty");
            NodeConditional {
                children,
                child_probs: p,
                ood,
                degenerate: false,
            }
        }
    };
    Ok(cond)
}

/// Conditionals for every internal node of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTable {
    pub model: ConditionalModel,
    pub root_ood: bool,
    pub entries: BTreeMap<NodeId, NodeConditional>,
}

impl ConditionalTable {
    /// Builds the table for all internal nodes.
    ///
    /// The root uses the depth-1 probabilities directly. With `root_ood` set,
    /// the root instead gets an OOD entry scored by [`root_ood_score`] and
    /// renormalized like the score-based models; without it `ood(root)` is 0.
    pub fn build(
        h: &Hierarchy,
        index: &DepthClassIndex,
        stack: &ProbabilityStack,
        model: ConditionalModel,
        root_ood: bool,
    ) -> Result<Self, ConditionalError> {
        let mut entries = BTreeMap::new();
        let root = h.root();
        for c in h.internal_nodes() {
            let cond = if c == root {
                let (children, cols, d) = child_columns(h, index, c)?;
                let row = stack.probs(d)?;
                let mass: Vec<f64> = cols.iter().map(|&i| row[i]).collect();
                let score = if root_ood {
                    root_ood_score(stack)?
                } else {
                    0.0
                };
                NodeConditional::normalized(children, mass, score)
            } else {
                conditional_for(h, index, c, stack, model)?
            };
            entries.insert(c, cond);
        }
        Ok(Self {
            model,
            root_ood,
            entries,
        })
    }

    pub fn get(&self, c: NodeId) -> Option<&NodeConditional> {
        self.entries.get(&c)
    }
}
