use std::collections::{BTreeMap, HashMap};

use super::{Hierarchy, NodeId};

/// A hierarchy extended with one synthetic `ood(c)` leaf under every internal node.
///
/// OOD ids are allocated as `max_base_id + 1 + k`, where `k` is the rank of the
/// owning internal node in ascending id order.
#[derive(Debug, Clone)]
pub struct AugmentedHierarchy {
    base: Hierarchy,
    ood_child: BTreeMap<NodeId, NodeId>,
    owner: HashMap<NodeId, NodeId>,
    leaves: Vec<NodeId>,
    leaf_position: HashMap<NodeId, usize>,
}

impl AugmentedHierarchy {
    pub fn new(base: Hierarchy) -> Self {
        let first = base.max_id().0 + 1;
        let ood_child: BTreeMap<NodeId, NodeId> = base
            .internal_nodes()
            .enumerate()
            .map(|(k, c)| (c, NodeId(first + k as u32)))
            .collect();
        let owner = ood_child.iter().map(|(&c, &o)| (o, c)).collect();
        let leaves: Vec<NodeId> = base.leaves().chain(ood_child.values().copied()).collect();
        let leaf_position = leaves.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        Self {
            base,
            ood_child,
            owner,
            leaves,
            leaf_position,
        }
    }

    pub fn base(&self) -> &Hierarchy {
        &self.base
    }

    pub fn into_base(self) -> Hierarchy {
        self.base
    }

    /// The OOD child of internal node `c`.
    pub fn ood_child(&self, c: NodeId) -> Option<NodeId> {
        self.ood_child.get(&c).copied()
    }

    /// The internal node owning an OOD leaf.
    pub fn ood_owner(&self, ood: NodeId) -> Option<NodeId> {
        self.owner.get(&ood).copied()
    }

    pub fn is_ood(&self, id: NodeId) -> bool {
        self.owner.contains_key(&id)
    }

    pub fn num_ood(&self) -> usize {
        self.ood_child.len()
    }

    /// Leaves of the augmented tree: base leaves then OOD leaves, each ascending.
    /// Since OOD ids exceed every base id this is ascending overall.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn leaf_position(&self, id: NodeId) -> Option<usize> {
        self.leaf_position.get(&id).copied()
    }

    /// Maps an augmented leaf to the base node it stands for: `ood(c)` becomes `c`.
    pub fn to_base(&self, id: NodeId) -> NodeId {
        self.ood_owner(id).unwrap_or(id)
    }

    /// Parent in the augmented tree.
    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        match self.ood_owner(id) {
            Some(c) => Some(c),
            None => self.base.parent(id).ok().flatten(),
        }
    }
}

impl Hierarchy {
    /// Appends an OOD child to every internal node.
    pub fn augment(&self) -> AugmentedHierarchy {
        AugmentedHierarchy::new(self.clone())
    }
}
