//! Construction of an ID hierarchy and OOD labels from a full hierarchy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Hierarchy, HierarchyError, NodeId, RawNode};

/// Roots of the subtrees that are held out as out-of-distribution.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ood_roots: Vec<NodeId>,
}

impl SplitSpec {
    pub fn new(ood_roots: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            ood_roots: ood_roots.into_iter().collect(),
        }
    }

    /// Checks that the roots exist, exclude the tree root and do not nest.
    pub fn validate(&self, full: &Hierarchy) -> Result<(), HierarchyError> {
        let mut seen = BTreeSet::new();
        for &r in &self.ood_roots {
            if !full.contains(r) {
                return Err(HierarchyError::UnknownNode(r));
            }
            if r == full.root() {
                return Err(HierarchyError::InvalidSpec(format!(
                    "root {r} cannot be an ood root"
                )));
            }
            if !seen.insert(r) {
                return Err(HierarchyError::InvalidSpec(format!(
                    "ood root {r} listed twice"
                )));
            }
        }
        for &a in &self.ood_roots {
            for &b in &self.ood_roots {
                if a != b && full.is_ancestor_of(a, b)? {
                    return Err(HierarchyError::InvalidSpec(format!(
                        "ood root {a} is an ancestor of ood root {b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Result of [`split_id_ood`].
#[derive(Debug, Clone)]
pub struct Split {
    /// The pruned ID hierarchy. Surviving nodes keep their original ids.
    pub id_tree: Hierarchy,
    /// Every held-out original leaf mapped to its closest surviving ancestor.
    pub ood_label_map: BTreeMap<NodeId, NodeId>,
    /// Nodes removed by single-child pruning.
    pub pruned: Vec<NodeId>,
}

impl Split {
    /// Number of held-out original leaves.
    pub fn num_ood_classes(&self) -> usize {
        self.ood_label_map.len()
    }

    /// Distinct internal nodes that act as OOD ground truth.
    pub fn ood_targets(&self) -> BTreeSet<NodeId> {
        self.ood_label_map.values().copied().collect()
    }
}

/// Removes the OOD subtrees, prunes single-child nodes and maps held-out leaves.
///
/// Internal nodes left without any child after removal are dropped as well,
/// otherwise they would surface as ID leaves without data. Pruning runs before
/// the label mapping so every OOD label is a node of the returned tree.
pub fn split_id_ood(full: &Hierarchy, spec: &SplitSpec) -> Result<Split, HierarchyError> {
    spec.validate(full)?;
    let n = full.len();

    let mut alive = vec![true; n];
    let mut held_out_leaves = Vec::new();
    for &r in &spec.ood_roots {
        let start = full.position(r).expect("validated");
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            alive[p] = false;
            if full.children_pos(p).is_empty() {
                held_out_leaves.push(full.node_at(p));
            }
            stack.extend(full.children_pos(p).iter().copied());
        }
    }

    // Drop internal nodes that lost all of their children, deepest first.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&p| std::cmp::Reverse(full.depth_pos(p)));
    for &p in &order {
        let kids = full.children_pos(p);
        if alive[p] && !kids.is_empty() && kids.iter().all(|&c| !alive[c]) {
            alive[p] = false;
        }
    }
    if !alive[full.root_pos()] {
        return Err(HierarchyError::EmptyIdTree);
    }

    let alive_children = |p: usize| full.children_pos(p).iter().filter(|&&c| alive[c]).count();

    // A non-root node with one surviving child disappears; its child moves up.
    // Removing it leaves its parent's child count unchanged, so one pass decides
    // the whole pruned set.
    let root = full.root_pos();
    let pruned: Vec<usize> = (0..n)
        .filter(|&p| alive[p] && p != root && alive_children(p) == 1)
        .collect();
    let mut kept = alive.clone();
    for &p in &pruned {
        kept[p] = false;
    }

    let surviving_ancestor = |mut p: usize| -> usize {
        loop {
            p = full.parent_pos(p).expect("root is always kept");
            if kept[p] {
                return p;
            }
        }
    };

    let mut raw = Vec::new();
    for p in (0..n).filter(|&p| kept[p]) {
        let id = full.node_at(p);
        let parent = (p != root).then(|| full.node_at(surviving_ancestor(p)));
        raw.push(RawNode {
            id,
            name: full.name(id)?.to_string(),
            parent,
        });
    }
    let id_tree = Hierarchy::build(raw)?;

    let ood_label_map = held_out_leaves
        .into_iter()
        .map(|leaf| {
            let p = full.position(leaf).expect("leaf from the same tree");
            (leaf, full.node_at(surviving_ancestor(p)))
        })
        .collect();

    Ok(Split {
        id_tree,
        ood_label_map,
        pruned: pruned.into_iter().map(|p| full.node_at(p)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::t1;
    use super::*;

    fn id(v: u32) -> NodeId {
        NodeId(v)
    }

    #[test]
    fn remove_single_leaf_without_pruning() {
        let full = t1();
        let split = split_id_ood(&full, &SplitSpec::new([id(5)])).unwrap();
        assert_eq!(split.id_tree.len(), 7);
        assert!(!split.id_tree.contains(id(5)));
        assert_eq!(split.ood_label_map, BTreeMap::from([(id(5), id(1))]));
        assert!(split.pruned.is_empty());
    }

    #[test]
    fn pruning_reattaches_only_child() {
        let full = t1();
        let split = split_id_ood(&full, &SplitSpec::new([id(4), id(5)])).unwrap();
        let t = &split.id_tree;
        assert!(!t.contains(id(1)));
        assert_eq!(t.parent(id(3)).unwrap(), Some(id(0)));
        assert_eq!(t.depth(id(3)).unwrap(), 1);
        assert_eq!(
            split.ood_label_map,
            BTreeMap::from([(id(4), id(0)), (id(5), id(0))])
        );
        assert_eq!(split.pruned, vec![id(1)]);
    }

    #[test]
    fn emptied_internal_node_is_removed() {
        let full = t1();
        let split = split_id_ood(&full, &SplitSpec::new([id(3), id(4), id(5)])).unwrap();
        // A loses every child and goes; R keeps B as its only child (root exempt).
        assert!(!split.id_tree.contains(id(1)));
        assert_eq!(split.id_tree.children(id(0)).unwrap(), vec![id(2)]);
        assert_eq!(split.ood_label_map[&id(3)], id(0));
    }

    #[test]
    fn single_child_root_is_kept() {
        let full = t1();
        let split = split_id_ood(&full, &SplitSpec::new([id(2)])).unwrap();
        assert_eq!(split.id_tree.root(), id(0));
        assert_eq!(split.id_tree.children(id(0)).unwrap(), vec![id(1)]);
        assert_eq!(split.ood_label_map.len(), 2);
        assert_eq!(split.ood_label_map[&id(6)], id(0));
    }

    #[test]
    fn invalid_specs() {
        let full = t1();
        assert!(matches!(
            split_id_ood(&full, &SplitSpec::new([id(0)])),
            Err(HierarchyError::InvalidSpec(_))
        ));
        assert!(matches!(
            split_id_ood(&full, &SplitSpec::new([id(1), id(3)])),
            Err(HierarchyError::InvalidSpec(_))
        ));
        assert_eq!(
            split_id_ood(&full, &SplitSpec::new([id(1), id(2)])).unwrap_err(),
            HierarchyError::EmptyIdTree
        );
        assert_eq!(
            split_id_ood(&full, &SplitSpec::new([id(42)])).unwrap_err(),
            HierarchyError::UnknownNode(id(42))
        );
    }
}
