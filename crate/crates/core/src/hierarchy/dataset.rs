use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Hierarchy, HierarchyError, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    IdTrain,
    IdTest,
    OodTest,
}

impl Partition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::IdTrain => "id_train",
            Partition::IdTest => "id_test",
            Partition::OodTest => "ood_test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "id_train" => Ok(Partition::IdTrain),
            "id_test" => Ok(Partition::IdTest),
            "ood_test" => Ok(Partition::OodTest),
            other => Err(format!("unknown partition '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample_id: String,
    pub label: NodeId,
    pub partition: Partition,
}

/// Labeled samples over an ID hierarchy: ID partitions carry leaf labels,
/// OOD samples carry internal-node labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<LabeledSample>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn partition(&self, p: Partition) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(move |s| s.partition == p)
    }

    /// Checks every label against the partition invariants of `h`.
    pub fn validate(&self, h: &Hierarchy) -> Result<(), HierarchyError> {
        for s in &self.samples {
            let leaf = h.is_leaf(s.label)?;
            match s.partition {
                Partition::IdTrain | Partition::IdTest if !leaf => {
                    return Err(HierarchyError::NotALeaf(s.label))
                }
                Partition::OodTest if leaf => {
                    return Err(HierarchyError::InvalidSpec(format!(
                        "ood sample '{}' is labeled with leaf {}",
                        s.sample_id, s.label
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
