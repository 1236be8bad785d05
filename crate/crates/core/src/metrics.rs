//! Balanced hierarchical metrics, node-local OOD quality and LCA decomposition.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditionals::{ConditionalTable, NodeConditional, ProbabilityStack};
use crate::hierarchy::{
    DepthClassIndex, Hierarchy, HierarchyError, LabeledDataset, NodeId, Partition,
};
use crate::inference::{marginalized_prediction, InferenceError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no class in the set has samples")]
    EmptyClassSet,
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("node {0} is a leaf")]
    NotInternal(NodeId),
    #[error("no OOD samples at node {0}")]
    NoOodSamplesAtNode(NodeId),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut s = CompensatedSum::default();
    let mut n = 0usize;
    for v in values {
        s.add(v);
        n += 1;
    }
    (n > 0).then(|| s.value() / n as f64)
}

fn check_lengths(predictions: &[NodeId], labels: &[NodeId]) -> Result<(), MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// Groups sample indices by label, keeping only labels in `class_set`.
fn by_class(labels: &[NodeId], class_set: &BTreeSet<NodeId>) -> BTreeMap<NodeId, Vec<usize>> {
    let mut out: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if class_set.contains(l) {
            out.entry(*l).or_default().push(i);
        }
    }
    out
}

/// Mean hierarchical distance per class of `class_set` that has samples.
pub fn per_class_mean_dist(
    h: &Hierarchy,
    predictions: &[NodeId],
    labels: &[NodeId],
    class_set: &BTreeSet<NodeId>,
) -> Result<BTreeMap<NodeId, f64>, MetricsError> {
    check_lengths(predictions, labels)?;
    let mut out = BTreeMap::new();
    for (c, idx) in by_class(labels, class_set) {
        let dists = idx
            .iter()
            .map(|&i| h.dist(predictions[i], c).map(f64::from))
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(c, mean(dists).expect("non-empty class"));
    }
    Ok(out)
}

/// Balanced mean hierarchical distance: per-class mean distances averaged
/// uniformly over the classes of `class_set` that have samples.
pub fn bmhd(
    h: &Hierarchy,
    predictions: &[NodeId],
    labels: &[NodeId],
    class_set: &BTreeSet<NodeId>,
) -> Result<f64, MetricsError> {
    let per_class = per_class_mean_dist(h, predictions, labels, class_set)?;
    mean(per_class.into_values()).ok_or(MetricsError::EmptyClassSet)
}

/// Mean per-class recall in percent over the classes of `class_set` that have samples.
pub fn balanced_accuracy(
    predictions: &[NodeId],
    labels: &[NodeId],
    class_set: &BTreeSet<NodeId>,
) -> Result<f64, MetricsError> {
    check_lengths(predictions, labels)?;
    let recalls = by_class(labels, class_set).into_iter().map(|(c, idx)| {
        let hits = idx.iter().filter(|&&i| predictions[i] == c).count();
        hits as f64 / idx.len() as f64
    });
    mean(recalls)
        .map(|r| 100.0 * r)
        .ok_or(MetricsError::EmptyClassSet)
}

/// Binary OOD-vs-ID quality of one node's conditional, OOD positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLocalMetrics {
    pub node: NodeId,
    pub num_id: usize,
    pub num_ood: usize,
    pub f1: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub purity: f64,
    pub dirty_f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Confusion {
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

impl Confusion {
    fn record(&mut self, truth_ood: bool, predicted_ood: bool) {
        match (truth_ood, predicted_ood) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// 1 when there is nothing to find and nothing was flagged.
    fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    fn tpr(&self) -> f64 {
        let pos = self.tp + self.fn_;
        if pos == 0 {
            0.0
        } else {
            self.tp as f64 / pos as f64
        }
    }

    fn fpr(&self) -> f64 {
        let neg = self.fp + self.tn;
        if neg == 0 {
            0.0
        } else {
            self.fp as f64 / neg as f64
        }
    }
}

/// Node-local metrics at internal node `c`.
///
/// The evaluation set is the OOD samples labeled exactly `c` plus the ID
/// (leaf-labeled) samples below `c`; other samples are ignored. A sample is
/// predicted OOD when `ood(c)` is strictly the most probable entry.
///
/// Purity is measured over ID samples predicted ID (1 when there are none).
/// Dirty F1 relabels every ID sample whose most probable child is wrong as OOD,
/// whether or not it was predicted OOD.
pub fn node_local_metrics<'a>(
    h: &Hierarchy,
    c: NodeId,
    samples: impl IntoIterator<Item = (&'a NodeConditional, NodeId)>,
) -> Result<NodeLocalMetrics, MetricsError> {
    if h.is_leaf(c)? {
        return Err(MetricsError::NotInternal(c));
    }
    let mut clean = Confusion::default();
    let mut dirty = Confusion::default();
    let (mut num_id, mut num_ood) = (0, 0);
    let (mut predicted_id, mut pure) = (0, 0);
    for (cond, label) in samples {
        let predicted_ood = cond.predicts_ood();
        if label == c {
            num_ood += 1;
            clean.record(true, predicted_ood);
            dirty.record(true, predicted_ood);
            continue;
        }
        if !h.is_leaf(label)? {
            continue;
        }
        let Some(truth_child) = h.child_toward(c, label)? else {
            continue;
        };
        num_id += 1;
        let correct = cond.argmax_child().map(|(y, _)| y) == Some(truth_child);
        clean.record(false, predicted_ood);
        dirty.record(!correct, predicted_ood);
        if !predicted_ood {
            predicted_id += 1;
            if correct {
                pure += 1;
            }
        }
    }
    if num_ood == 0 {
        return Err(MetricsError::NoOodSamplesAtNode(c));
    }
    Ok(NodeLocalMetrics {
        node: c,
        num_id,
        num_ood,
        f1: clean.f1(),
        fpr: clean.fpr(),
        tpr: clean.tpr(),
        purity: if predicted_id == 0 {
            1.0
        } else {
            pure as f64 / predicted_id as f64
        },
        dirty_f1: dirty.f1(),
    })
}

/// Node-local metrics for every non-root internal node with OOD samples,
/// plus their unweighted means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLocalSummary {
    pub nodes: Vec<NodeLocalMetrics>,
    pub mean_f1: f64,
    pub mean_fpr: f64,
    pub mean_tpr: f64,
    pub mean_purity: f64,
    pub mean_dirty_f1: f64,
}

impl NodeLocalSummary {
    /// `tables[i]` holds the conditionals of the sample labeled `labels[i]`.
    /// Returns `None` when no node has OOD samples.
    pub fn compute(
        h: &Hierarchy,
        tables: &[ConditionalTable],
        labels: &[NodeId],
    ) -> Result<Option<Self>, MetricsError> {
        if tables.len() != labels.len() {
            return Err(MetricsError::LengthMismatch {
                predictions: tables.len(),
                labels: labels.len(),
            });
        }
        let mut nodes = Vec::new();
        for c in h.internal_nodes() {
            let mut samples = Vec::new();
            for (t, &l) in tables.iter().zip(labels) {
                if let Some(cond) = t.get(c) {
                    samples.push((cond, l));
                }
            }
            match node_local_metrics(h, c, samples) {
                Ok(m) => nodes.push(m),
                Err(MetricsError::NoOodSamplesAtNode(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if nodes.is_empty() {
            return Ok(None);
        }
        let avg = |f: fn(&NodeLocalMetrics) -> f64| mean(nodes.iter().map(f)).expect("non-empty");
        Ok(Some(Self {
            mean_f1: avg(|m| m.f1),
            mean_fpr: avg(|m| m.fpr),
            mean_tpr: avg(|m| m.tpr),
            mean_purity: avg(|m| m.purity),
            mean_dirty_f1: avg(|m| m.dirty_f1),
            nodes,
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LcaKind {
    Exact,
    PureOver,
    PureUnder,
    Mixed,
}

/// Split of `dist(prediction, label)` at their lowest common ancestor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LcaDecomposition {
    /// `dist(lca, prediction)`.
    pub over: u32,
    /// `dist(lca, label)`.
    pub under: u32,
    pub kind: LcaKind,
}

pub fn lca_decompose(
    h: &Hierarchy,
    prediction: NodeId,
    label: NodeId,
) -> Result<LcaDecomposition, MetricsError> {
    let lca = h.lca(prediction, label)?;
    let over = h.dist(lca, prediction)?;
    let under = h.dist(lca, label)?;
    let kind = match (over, under) {
        (0, 0) => LcaKind::Exact,
        (_, 0) => LcaKind::PureOver,
        (0, _) => LcaKind::PureUnder,
        _ => LcaKind::Mixed,
    };
    Ok(LcaDecomposition { over, under, kind })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramCell {
    pub overdist: u32,
    pub underdist: u32,
    pub count: usize,
}

/// Sample counts per `(overdist, underdist)` pair, sorted by the pair.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LcaHistogram {
    cells: Vec<HistogramCell>,
}

impl LcaHistogram {
    pub fn from_decompositions(items: impl IntoIterator<Item = LcaDecomposition>) -> Self {
        let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for d in items {
            *counts.entry((d.over, d.under)).or_default() += 1;
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(counts: BTreeMap<(u32, u32), usize>) -> Self {
        Self {
            cells: counts
                .into_iter()
                .filter(|&(_, n)| n > 0)
                .map(|((overdist, underdist), count)| HistogramCell {
                    overdist,
                    underdist,
                    count,
                })
                .collect(),
        }
    }

    pub fn cells(&self) -> &[HistogramCell] {
        &self.cells
    }

    pub fn count(&self, over: u32, under: u32) -> usize {
        self.cells
            .iter()
            .find(|c| c.overdist == over && c.underdist == under)
            .map_or(0, |c| c.count)
    }

    pub fn total(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }

    /// Adds another histogram's counts.
    pub fn merged(&self, other: &Self) -> Self {
        let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for c in self.cells.iter().chain(&other.cells) {
            *counts.entry((c.overdist, c.underdist)).or_default() += c.count;
        }
        Self::from_counts(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_id_samples: usize,
    pub num_ood_samples: usize,
    /// Mean distance in edges per ground-truth class, ID and OOD classes together.
    pub per_class_mean_dist: BTreeMap<NodeId, f64>,
    pub bmhd_id: f64,
    pub bmhd_ood: f64,
    pub mix_bmhd: f64,
    pub bacc_id: f64,
    pub bacc_ood: f64,
    pub mix_bacc: f64,
    pub node_local: Option<NodeLocalSummary>,
    pub lca_histogram_id: LcaHistogram,
    pub lca_histogram_ood: LcaHistogram,
}

impl EvalReport {
    /// Both histograms added together.
    pub fn lca_histogram(&self) -> LcaHistogram {
        self.lca_histogram_id.merged(&self.lca_histogram_ood)
    }
}

/// Evaluates predictions aligned with `dataset.samples`.
///
/// Training samples are skipped. Leaf-labeled samples count as ID and
/// internal-labeled samples as OOD.
pub fn evaluate(
    h: &Hierarchy,
    predictions: &[NodeId],
    dataset: &LabeledDataset,
) -> Result<EvalReport, MetricsError> {
    if predictions.len() != dataset.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: dataset.len(),
        });
    }
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut id_classes = BTreeSet::new();
    let mut ood_classes = BTreeSet::new();
    let mut hist_id = Vec::new();
    let mut hist_ood = Vec::new();
    for (s, &p) in dataset.samples.iter().zip(predictions) {
        if s.partition == Partition::IdTrain {
            continue;
        }
        let decomposition = lca_decompose(h, p, s.label)?;
        if h.is_leaf(s.label)? {
            id_classes.insert(s.label);
            hist_id.push(decomposition);
        } else {
            ood_classes.insert(s.label);
            hist_ood.push(decomposition);
        }
        preds.push(p);
        labels.push(s.label);
    }
    let all: BTreeSet<NodeId> = id_classes.union(&ood_classes).copied().collect();
    let bmhd_id = bmhd(h, &preds, &labels, &id_classes)?;
    let bmhd_ood = bmhd(h, &preds, &labels, &ood_classes)?;
    let bacc_id = balanced_accuracy(&preds, &labels, &id_classes)?;
    let bacc_ood = balanced_accuracy(&preds, &labels, &ood_classes)?;
    Ok(EvalReport {
        num_id_samples: hist_id.len(),
        num_ood_samples: hist_ood.len(),
        per_class_mean_dist: per_class_mean_dist(h, &preds, &labels, &all)?,
        bmhd_id,
        bmhd_ood,
        mix_bmhd: 0.5 * (bmhd_id + bmhd_ood),
        bacc_id,
        bacc_ood,
        mix_bacc: 0.5 * (bacc_id + bacc_ood),
        node_local: None,
        lca_histogram_id: LcaHistogram::from_decompositions(hist_id),
        lca_histogram_ood: LcaHistogram::from_decompositions(hist_ood),
    })
}

/// OOD accuracy at one ground-truth depth, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthAccuracy {
    pub depth: usize,
    pub num_samples: usize,
    pub multi_depth: f64,
    pub marginalized: f64,
}

/// Depth-`d` classifier vs marginalized deepest classifier on OOD samples
/// whose label sits at depth `d`, for `1 <= d < D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthAccuracyComparison {
    pub per_depth: Vec<DepthAccuracy>,
    /// Plain accuracy pooled over every evaluated sample.
    pub multi_depth: f64,
    pub marginalized: f64,
}

impl DepthAccuracyComparison {
    pub fn delta(&self) -> f64 {
        self.multi_depth - self.marginalized
    }
}

/// `stacks[i]` belongs to the sample labeled `labels[i]`; leaf and root labels are skipped.
pub fn depth_accuracy_comparison(
    h: &Hierarchy,
    index: &DepthClassIndex,
    stacks: &[ProbabilityStack],
    labels: &[NodeId],
) -> Result<DepthAccuracyComparison, MetricsError> {
    if stacks.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: stacks.len(),
            labels: labels.len(),
        });
    }
    let deepest = index.max_depth();
    let mut hits: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for (stack, &label) in stacks.iter().zip(labels) {
        if h.is_leaf(label)? {
            continue;
        }
        let d = h.depth(label)?;
        if d == 0 || d >= deepest {
            continue;
        }
        let row = stack
            .probs(d)
            .map_err(|e| MetricsError::Inference(e.into()))?;
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, &p)| if p > row[b] { i } else { b });
        let direct = index.classes(d)[best] == label;
        let marg = marginalized_prediction(h, index, stack, d)? == label;
        let e = hits.entry(d).or_default();
        e.0 += 1;
        e.1 += usize::from(direct);
        e.2 += usize::from(marg);
    }
    let pct = |k: usize, n: usize| {
        if n == 0 {
            0.0
        } else {
            100.0 * k as f64 / n as f64
        }
    };
    let (n, a, b) = hits
        .values()
        .fold((0, 0, 0), |acc, v| (acc.0 + v.0, acc.1 + v.1, acc.2 + v.2));
    Ok(DepthAccuracyComparison {
        per_depth: hits
            .iter()
            .map(|(&depth, &(n, a, b))| DepthAccuracy {
                depth,
                num_samples: n,
                multi_depth: pct(a, n),
                marginalized: pct(b, n),
            })
            .collect(),
        multi_depth: pct(a, n),
        marginalized: pct(b, n),
    })
}
