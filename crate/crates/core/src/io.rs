//! Wire formats: hierarchy and split JSON, label and probability CSVs,
//! prediction CSVs, report JSON and histogram CSV.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditionals::{ConditionalError, ProbabilityStack};
use crate::hierarchy::{
    DepthClassIndex, Hierarchy, HierarchyError, LabeledDataset, LabeledSample, NodeId, Partition,
    RawNode, SplitSpec,
};
use crate::inference::{DecisionRule, Prediction};
use crate::metrics::{HistogramCell, LcaHistogram};

/// Row sums of probability files may deviate from 1 by this much.
pub const ROW_SUM_TOL: f64 = 1e-5;
/// Rows further than this from 1 are renormalized on load; closer rows are kept
/// verbatim so that written files read back bit-for-bit.
pub const RENORMALIZE_ABOVE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InFile { path: PathBuf, source: Box<IoError> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("depth {depth}: header column {column} is '{found}', expected '{expected}'")]
    HeaderMismatch {
        depth: usize,
        column: usize,
        expected: String,
        found: String,
    },
    #[error("depth {depth}: sample set differs from depth 1 ({detail})")]
    SampleSetMismatch { depth: usize, detail: String },
    #[error("depth {depth}: row for sample '{sample_id}' sums to {sum}")]
    RowSumViolation {
        depth: usize,
        sample_id: String,
        sum: f64,
    },
    #[error("depth {depth}: bad value '{value}' for sample '{sample_id}'")]
    BadValue {
        depth: usize,
        sample_id: String,
        value: String,
    },
    #[error("duplicate sample '{0}'")]
    DuplicateSample(String),
    #[error("expected {expected} depth files, got {found}")]
    DepthCount { expected: usize, found: usize },
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Conditional(#[from] ConditionalError),
}

impl IoError {
    fn at(self, path: &Path) -> Self {
        match self {
            IoError::Io(source) => IoError::File {
                path: path.to_path_buf(),
                source,
            },
            e @ (IoError::File { .. } | IoError::InFile { .. }) => e,
            e => IoError::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| IoError::File {
            path: path.to_path_buf(),
            source,
        })
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| IoError::File {
            path: path.to_path_buf(),
            source,
        })
}

fn read_path<T>(
    path: &Path,
    f: impl FnOnce(BufReader<File>) -> Result<T, IoError>,
) -> Result<T, IoError> {
    f(open(path)?).map_err(|e| e.at(path))
}

fn write_path(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> Result<(), IoError>,
) -> Result<(), IoError> {
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| Ok(w.flush()?))
        .map_err(|e| e.at(path))
}

fn read_json<T: DeserializeOwned>(r: impl Read) -> Result<T, IoError> {
    Ok(serde_json::from_reader(r)?)
}

fn write_json<T: Serialize>(mut w: impl Write, value: &T) -> Result<(), IoError> {
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

/// `{"nodes": [{"id": .., "name": .., "parent": ..}, ...]}`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyFile {
    pub nodes: Vec<RawNode>,
}

pub fn read_hierarchy_from(r: impl Read) -> Result<Hierarchy, IoError> {
    let file: HierarchyFile = read_json(r)?;
    Ok(Hierarchy::build(file.nodes)?)
}

pub fn write_hierarchy_to(w: impl Write, h: &Hierarchy) -> Result<(), IoError> {
    write_json(
        w,
        &HierarchyFile {
            nodes: h.raw_nodes(),
        },
    )
}

pub fn read_hierarchy(path: &Path) -> Result<Hierarchy, IoError> {
    read_path(path, read_hierarchy_from)
}

pub fn write_hierarchy(path: &Path, h: &Hierarchy) -> Result<(), IoError> {
    write_path(path, |w| write_hierarchy_to(w, h))
}

/// `{"ood_roots": [..]}`
pub fn read_split_spec(path: &Path) -> Result<SplitSpec, IoError> {
    read_path(path, read_json)
}

pub fn write_split_spec(path: &Path, spec: &SplitSpec) -> Result<(), IoError> {
    write_path(path, |w| write_json(w, spec))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct LabelRecord {
    sample_id: String,
    node_id: NodeId,
    partition: Partition,
}

/// Labels CSV with header `sample_id,node_id,partition`.
pub fn read_labels_from(r: impl Read) -> Result<LabeledDataset, IoError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut seen = BTreeSet::new();
    let mut samples = Vec::new();
    for rec in rdr.deserialize() {
        let rec: LabelRecord = rec?;
        if !seen.insert(rec.sample_id.clone()) {
            return Err(IoError::DuplicateSample(rec.sample_id));
        }
        samples.push(LabeledSample {
            sample_id: rec.sample_id,
            label: rec.node_id,
            partition: rec.partition,
        });
    }
    Ok(LabeledDataset::new(samples))
}

pub fn write_labels_to(w: impl Write, ds: &LabeledDataset) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in &ds.samples {
        wtr.serialize(LabelRecord {
            sample_id: s.sample_id.clone(),
            node_id: s.label,
            partition: s.partition,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<LabeledDataset, IoError> {
    read_path(path, read_labels_from)
}

pub fn write_labels(path: &Path, ds: &LabeledDataset) -> Result<(), IoError> {
    write_path(path, |w| write_labels_to(w, ds))
}

/// One depth's matrix: a row of class values per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub classes: Vec<NodeId>,
    pub sample_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// How rows are checked when reading a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    /// Non-negative rows summing to 1 within [`ROW_SUM_TOL`].
    Probabilities,
    /// Any finite values.
    Logits,
}

/// Reads a matrix whose header must be `sample_id` followed by `index.classes(depth)`.
pub fn read_matrix_from(
    r: impl Read,
    depth: usize,
    index: &DepthClassIndex,
    kind: MatrixKind,
) -> Result<Matrix, IoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut records = rdr.records();
    let header = records.next().transpose()?.unwrap_or_default();
    let classes = index.classes(depth);
    let expected: Vec<String> = std::iter::once("sample_id".to_string())
        .chain(classes.iter().map(|c| c.to_string()))
        .collect();
    for (column, want) in expected.iter().enumerate() {
        let found = header.get(column).unwrap_or("");
        if found.trim() != want {
            return Err(IoError::HeaderMismatch {
                depth,
                column,
                expected: want.clone(),
                found: found.to_string(),
            });
        }
    }
    if header.len() > expected.len() {
        return Err(IoError::HeaderMismatch {
            depth,
            column: expected.len(),
            expected: String::new(),
            found: header[expected.len()].to_string(),
        });
    }
    let mut sample_ids = Vec::new();
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in records {
        let rec = rec?;
        let sample_id = rec.get(0).unwrap_or("").to_string();
        if !seen.insert(sample_id.clone()) {
            return Err(IoError::DuplicateSample(sample_id));
        }
        if rec.len() != expected.len() {
            return Err(IoError::BadValue {
                depth,
                sample_id,
                value: format!("{} fields", rec.len()),
            });
        }
        let mut row = Vec::with_capacity(classes.len());
        for field in rec.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| IoError::BadValue {
                depth,
                sample_id: sample_id.clone(),
                value: field.to_string(),
            })?;
            let ok = match kind {
                MatrixKind::Probabilities => v.is_finite() && v >= 0.0,
                MatrixKind::Logits => v.is_finite(),
            };
            if !ok {
                return Err(IoError::BadValue {
                    depth,
                    sample_id,
                    value: field.to_string(),
                });
            }
            row.push(v);
        }
        if kind == MatrixKind::Probabilities {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(IoError::RowSumViolation {
                    depth,
                    sample_id,
                    sum,
                });
            }
            if (sum - 1.0).abs() > RENORMALIZE_ABOVE {
                for v in &mut row {
                    *v /= sum;
                }
            }
        }
        sample_ids.push(sample_id);
        rows.push(row);
    }
    Ok(Matrix {
        classes: classes.to_vec(),
        sample_ids,
        rows,
    })
}

/// Writes a matrix with 17 significant digits per value.
pub fn write_matrix_to(mut w: impl Write, m: &Matrix) -> Result<(), IoError> {
    write!(w, "sample_id")?;
    for c in &m.classes {
        write!(w, ",{c}")?;
    }
    writeln!(w)?;
    for (id, row) in m.sample_ids.iter().zip(&m.rows) {
        write!(w, "{}", csv_field(id))?;
        for v in row {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn read_matrix(
    path: &Path,
    depth: usize,
    index: &DepthClassIndex,
    kind: MatrixKind,
) -> Result<Matrix, IoError> {
    read_path(path, |r| read_matrix_from(r, depth, index, kind))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<(), IoError> {
    write_path(path, |w| write_matrix_to(w, m))
}

fn same_samples(depth: usize, reference: &[String], other: &[String]) -> Result<(), IoError> {
    let a: BTreeSet<&String> = reference.iter().collect();
    let b: BTreeSet<&String> = other.iter().collect();
    if let Some(s) = a.difference(&b).next() {
        return Err(IoError::SampleSetMismatch {
            depth,
            detail: format!("'{s}' missing"),
        });
    }
    if let Some(s) = b.difference(&a).next() {
        return Err(IoError::SampleSetMismatch {
            depth,
            detail: format!("'{s}' unexpected"),
        });
    }
    Ok(())
}

/// Assembles per-sample stacks from per-depth matrices, sorted by sample id.
pub fn stacks_from_matrices(
    probs: Vec<Matrix>,
    logits: Option<Vec<Matrix>>,
    index: &DepthClassIndex,
) -> Result<Vec<(String, ProbabilityStack)>, IoError> {
    let depth = index.max_depth();
    if probs.len() != depth {
        return Err(IoError::DepthCount {
            expected: depth,
            found: probs.len(),
        });
    }
    if let Some(l) = &logits {
        if l.len() != depth {
            return Err(IoError::DepthCount {
                expected: depth,
                found: l.len(),
            });
        }
    }
    let mut ids = probs[0].sample_ids.clone();
    ids.sort();
    let lookup = |m: &Matrix| -> std::collections::HashMap<String, usize> {
        m.sample_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect()
    };
    let mut prob_maps = Vec::with_capacity(depth);
    for (d, m) in probs.iter().enumerate() {
        same_samples(d + 1, &probs[0].sample_ids, &m.sample_ids)?;
        prob_maps.push(lookup(m));
    }
    let mut logit_maps = Vec::new();
    if let Some(ls) = &logits {
        for (d, m) in ls.iter().enumerate() {
            same_samples(d + 1, &probs[0].sample_ids, &m.sample_ids)?;
            logit_maps.push(lookup(m));
        }
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let p: Vec<Vec<f64>> = probs
            .iter()
            .zip(&prob_maps)
            .map(|(m, map)| m.rows[map[&id]].clone())
            .collect();
        let l = logits.as_ref().map(|ls| {
            ls.iter()
                .zip(&logit_maps)
                .map(|(m, map)| m.rows[map[&id]].clone())
                .collect()
        });
        let stack = ProbabilityStack::new(p, l)?;
        stack.check_shape(index)?;
        out.push((id, stack));
    }
    Ok(out)
}

/// Loads one probability file per depth (and optionally matching logits files).
pub fn load_stack_files(
    prob_paths: &[PathBuf],
    logit_paths: Option<&[PathBuf]>,
    index: &DepthClassIndex,
) -> Result<Vec<(String, ProbabilityStack)>, IoError> {
    let read_all = |paths: &[PathBuf], kind| -> Result<Vec<Matrix>, IoError> {
        if paths.len() != index.max_depth() {
            return Err(IoError::DepthCount {
                expected: index.max_depth(),
                found: paths.len(),
            });
        }
        paths
            .iter()
            .enumerate()
            .map(|(i, p)| read_matrix(p, i + 1, index, kind))
            .collect()
    };
    let probs = read_all(prob_paths, MatrixKind::Probabilities)?;
    let logits = logit_paths
        .map(|p| read_all(p, MatrixKind::Logits))
        .transpose()?;
    stacks_from_matrices(probs, logits, index)
}

/// Standard file names inside a stack directory.
pub fn stack_file_names(dir: &Path, depth: usize) -> (Vec<PathBuf>, Vec<PathBuf>) {
    (1..=depth)
        .map(|d| {
            (
                dir.join(format!("probs_d{d}.csv")),
                dir.join(format!("logits_d{d}.csv")),
            )
        })
        .unzip()
}

/// Writes `probs_d{d}.csv` (and `logits_d{d}.csv` when every stack has logits).
pub fn write_stack_files(
    dir: &Path,
    index: &DepthClassIndex,
    stacks: &[(String, ProbabilityStack)],
) -> Result<(), IoError> {
    let (prob_paths, logit_paths) = stack_file_names(dir, index.max_depth());
    let with_logits = !stacks.is_empty() && stacks.iter().all(|(_, s)| s.has_logits());
    let sample_ids: Vec<String> = stacks.iter().map(|(id, _)| id.clone()).collect();
    for d in 1..=index.max_depth() {
        let probs = Matrix {
            classes: index.classes(d).to_vec(),
            sample_ids: sample_ids.clone(),
            rows: stacks
                .iter()
                .map(|(_, s)| s.probs(d).map(<[f64]>::to_vec))
                .collect::<Result<_, _>>()?,
        };
        write_matrix(&prob_paths[d - 1], &probs)?;
        if with_logits {
            let logits = Matrix {
                rows: stacks
                    .iter()
                    .map(|(_, s)| s.logits(d).map(<[f64]>::to_vec))
                    .collect::<Result<_, _>>()?,
                ..probs
            };
            write_matrix(&logit_paths[d - 1], &logits)?;
        }
    }
    Ok(())
}

/// One row of the `infer` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub predicted_node: NodeId,
    pub rule: DecisionRule,
    pub expected_dist: Option<f64>,
    pub prob_mass: f64,
}

impl PredictionRecord {
    pub fn new(sample_id: impl Into<String>, p: &Prediction) -> Self {
        Self {
            sample_id: sample_id.into(),
            predicted_node: p.node,
            rule: p.rule,
            expected_dist: p.expected_dist,
            prob_mass: p.prob_mass,
        }
    }
}

pub fn read_predictions_from(r: impl Read) -> Result<Vec<PredictionRecord>, IoError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let rec: PredictionRecord = rec?;
        if !seen.insert(rec.sample_id.clone()) {
            return Err(IoError::DuplicateSample(rec.sample_id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_predictions_to(w: impl Write, records: &[PredictionRecord]) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, IoError> {
    read_path(path, read_predictions_from)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), IoError> {
    write_path(path, |w| write_predictions_to(w, records))
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    read_path(path, read_json)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_path(path, |w| write_json(w, value))
}

/// Histogram CSV with header `overdist,underdist,count`.
pub fn read_histogram_from(r: impl Read) -> Result<LcaHistogram, IoError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut counts = std::collections::BTreeMap::new();
    for rec in rdr.deserialize() {
        let c: HistogramCell = rec?;
        *counts.entry((c.overdist, c.underdist)).or_insert(0) += c.count;
    }
    Ok(LcaHistogram::from_counts(counts))
}

pub fn write_histogram_to(w: impl Write, h: &LcaHistogram) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(w);
    if h.cells().is_empty() {
        wtr.write_record(["overdist", "underdist", "count"])?;
    }
    for c in h.cells() {
        wtr.serialize(c)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_histogram(path: &Path) -> Result<LcaHistogram, IoError> {
    read_path(path, read_histogram_from)
}

pub fn write_histogram(path: &Path, h: &LcaHistogram) -> Result<(), IoError> {
    write_path(path, |w| write_histogram_to(w, h))
}
