use std::collections::{BTreeSet, HashMap};

use super::{Hierarchy, NodeId};

/// Per-depth class sets `{ λ(y, d) : y ∈ C^id }` with column lookup.
///
/// Column order is ascending node id, which is also the header order of
/// probability matrix files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthClassIndex {
    classes: Vec<Vec<NodeId>>,
    columns: Vec<HashMap<NodeId, usize>>,
}

impl DepthClassIndex {
    pub fn new(h: &Hierarchy) -> Self {
        let depth = h.max_depth();
        let mut classes = Vec::with_capacity(depth);
        for d in 1..=depth {
            let set: BTreeSet<NodeId> = h
                .leaves()
                .map(|y| h.ancestor_at_depth(y, d).expect("leaf of h"))
                .collect();
            classes.push(set.into_iter().collect::<Vec<_>>());
        }
        let columns = classes
            .iter()
            .map(|cs| cs.iter().enumerate().map(|(i, &c)| (c, i)).collect())
            .collect();
        Self { classes, columns }
    }

    /// Deepest depth covered (`D`).
    pub fn max_depth(&self) -> usize {
        self.classes.len()
    }

    /// Classes of the depth-`d` classifier, `1 <= d <= D`.
    pub fn classes(&self, d: usize) -> &[NodeId] {
        &self.classes[d - 1]
    }

    pub fn num_classes(&self, d: usize) -> usize {
        self.classes[d - 1].len()
    }

    pub fn column(&self, d: usize, id: NodeId) -> Option<usize> {
        self.columns.get(d.checked_sub(1)?)?.get(&id).copied()
    }

    /// Class counts for depths `1..=D`.
    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }
}

impl Hierarchy {
    pub fn depth_class_index(&self) -> DepthClassIndex {
        DepthClassIndex::new(self)
    }
}
