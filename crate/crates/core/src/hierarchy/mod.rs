//! Class hierarchy data model and structural queries.
//!
//! A [`Hierarchy`] is an immutable rooted tree over [`NodeId`]s. Nodes are
//! stored densely in ascending id order, so every iteration order exposed here
//! (children, leaves, internal nodes) is ascending by id and reproducible.

mod augment;
mod dataset;
mod depth_index;
mod split;

pub use augment::AugmentedHierarchy;
pub use dataset::{LabeledDataset, LabeledSample, Partition};
pub use depth_index::DepthClassIndex;
pub use split::{split_id_ood, Split, SplitSpec};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a node in a class hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

/// One node record as it appears in a hierarchy file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawNode {
    pub id: NodeId,
    pub name: String,
    pub parent: Option<NodeId>,
}

impl RawNode {
    pub fn new(id: u32, name: impl Into<String>, parent: Option<u32>) -> Self {
        Self {
            id: NodeId(id),
            name: name.into(),
            parent: parent.map(NodeId),
        }
    }
}

fn join_ids(ids: &[NodeId]) -> String {
    ids.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HierarchyError {
    #[error("hierarchy has no nodes")]
    Empty,
    #[error("multiple root nodes: {}", join_ids(.0))]
    MultipleRoots(Vec<NodeId>),
    #[error("cycle detected among nodes: {}", join_ids(.0))]
    CycleDetected(Vec<NodeId>),
    #[error("duplicate node ids: {}", join_ids(.0))]
    DuplicateId(Vec<NodeId>),
    #[error("node {node} references missing parent {parent}")]
    DanglingParent { node: NodeId, parent: NodeId },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is not a leaf")]
    NotALeaf(NodeId),
    #[error("invalid depth {0}: must be at least 1")]
    InvalidDepth(usize),
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
    #[error("split removes every leaf of the hierarchy")]
    EmptyIdTree,
}

/// A validated directed rooted tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hierarchy {
    ids: Vec<NodeId>,
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    root: usize,
    leaves: Vec<usize>,
    max_depth: usize,
    position: HashMap<NodeId, usize>,
}

impl Hierarchy {
    /// Validates a raw node list and derives root, children, depths and leaves.
    pub fn build(mut nodes: Vec<RawNode>) -> Result<Self, HierarchyError> {
        if nodes.is_empty() {
            return Err(HierarchyError::Empty);
        }
        nodes.sort_by_key(|n| n.id);

        let dups: BTreeSet<NodeId> = nodes
            .windows(2)
            .filter(|w| w[0].id == w[1].id)
            .map(|w| w[0].id)
            .collect();
        if !dups.is_empty() {
            return Err(HierarchyError::DuplicateId(dups.into_iter().collect()));
        }

        let position: HashMap<NodeId, usize> =
            nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();

        let mut parent = Vec::with_capacity(nodes.len());
        for n in &nodes {
            match n.parent {
                None => parent.push(None),
                Some(p) => match position.get(&p) {
                    Some(&pi) => parent.push(Some(pi)),
                    None => {
                        return Err(HierarchyError::DanglingParent {
                            node: n.id,
                            parent: p,
                        })
                    }
                },
            }
        }

        let roots: Vec<usize> = (0..nodes.len()).filter(|&i| parent[i].is_none()).collect();
        if roots.len() > 1 {
            return Err(HierarchyError::MultipleRoots(
                roots.iter().map(|&i| nodes[i].id).collect(),
            ));
        }
        let Some(&root) = roots.first() else {
            return Err(HierarchyError::CycleDetected(
                nodes.iter().map(|n| n.id).collect(),
            ));
        };

        // Positions are ascending by id, so pushing in index order keeps
        // every child list sorted.
        let mut children = vec![Vec::new(); nodes.len()];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }

        let mut depth = vec![usize::MAX; nodes.len()];
        depth[root] = 0;
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            for &c in &children[n] {
                depth[c] = depth[n] + 1;
                stack.push(c);
            }
        }
        let unreached: Vec<NodeId> = (0..nodes.len())
            .filter(|&i| depth[i] == usize::MAX)
            .map(|i| nodes[i].id)
            .collect();
        if !unreached.is_empty() {
            return Err(HierarchyError::CycleDetected(unreached));
        }

        let leaves: Vec<usize> = (0..nodes.len())
            .filter(|&i| children[i].is_empty())
            .collect();
        let max_depth = depth.iter().copied().max().unwrap_or(0);

        let (ids, names) = nodes.into_iter().map(|n| (n.id, n.name)).unzip();
        Ok(Self {
            ids,
            names,
            parent,
            children,
            depth,
            root,
            leaves,
            max_depth,
            position,
        })
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn root(&self) -> NodeId {
        self.ids[self.root]
    }

    /// Maximum node depth `D`.
    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.position.contains_key(&id)
    }

    /// Dense position of a node (ascending id order), usable as a matrix index.
    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.position.get(&id).copied()
    }

    /// Inverse of [`Hierarchy::position`].
    pub fn node_at(&self, pos: usize) -> NodeId {
        self.ids[pos]
    }

    fn pos(&self, id: NodeId) -> Result<usize, HierarchyError> {
        self.position(id).ok_or(HierarchyError::UnknownNode(id))
    }

    /// All node ids in ascending order.
    pub fn nodes(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn max_id(&self) -> NodeId {
        *self.ids.last().expect("hierarchy is never empty")
    }

    pub fn name(&self, id: NodeId) -> Result<&str, HierarchyError> {
        Ok(&self.names[self.pos(id)?])
    }

    pub fn parent(&self, id: NodeId) -> Result<Option<NodeId>, HierarchyError> {
        Ok(self.parent[self.pos(id)?].map(|p| self.ids[p]))
    }

    pub fn children(&self, id: NodeId) -> Result<Vec<NodeId>, HierarchyError> {
        Ok(self.children[self.pos(id)?]
            .iter()
            .map(|&c| self.ids[c])
            .collect())
    }

    pub fn depth(&self, id: NodeId) -> Result<usize, HierarchyError> {
        Ok(self.depth[self.pos(id)?])
    }

    pub fn is_leaf(&self, id: NodeId) -> Result<bool, HierarchyError> {
        Ok(self.children[self.pos(id)?].is_empty())
    }

    /// Leaf set `C^id`, ascending.
    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.leaves.iter().map(|&i| self.ids[i])
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Nodes with at least one child, ascending.
    pub fn internal_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.len())
            .filter(|&i| !self.children[i].is_empty())
            .map(|i| self.ids[i])
    }

    pub fn num_internal(&self) -> usize {
        self.len() - self.leaves.len()
    }

    /// The node followed by all of its ancestors, ending at the root.
    pub fn ancestors(&self, id: NodeId) -> Result<Vec<NodeId>, HierarchyError> {
        let mut cur = Some(self.pos(id)?);
        let mut out = Vec::new();
        while let Some(i) = cur {
            out.push(self.ids[i]);
            cur = self.parent[i];
        }
        Ok(out)
    }

    /// True when `anc` lies on the path from `node` to the root (inclusive).
    pub fn is_ancestor_of(&self, anc: NodeId, node: NodeId) -> Result<bool, HierarchyError> {
        let a = self.pos(anc)?;
        let mut cur = self.pos(node)?;
        while self.depth[cur] > self.depth[a] {
            cur = self.parent[cur].expect("non-root node has a parent");
        }
        Ok(cur == a)
    }

    fn lca_pos(&self, mut a: usize, mut b: usize) -> usize {
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].expect("non-root node has a parent");
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].expect("non-root node has a parent");
        }
        while a != b {
            a = self.parent[a].expect("non-root node has a parent");
            b = self.parent[b].expect("non-root node has a parent");
        }
        a
    }

    /// Lowest common ancestor; a node counts as its own descendant.
    pub fn lca(&self, a: NodeId, b: NodeId) -> Result<NodeId, HierarchyError> {
        Ok(self.ids[self.lca_pos(self.pos(a)?, self.pos(b)?)])
    }

    /// Number of edges on the path between `a` and `b`.
    pub fn dist(&self, a: NodeId, b: NodeId) -> Result<u32, HierarchyError> {
        let (pa, pb) = (self.pos(a)?, self.pos(b)?);
        Ok(self.dist_pos(pa, pb))
    }

    pub(crate) fn dist_pos(&self, a: usize, b: usize) -> u32 {
        let l = self.lca_pos(a, b);
        (self.depth[a] + self.depth[b] - 2 * self.depth[l]) as u32
    }

    /// Ancestor of `id` at depth `d`, or `id` itself when it is not deeper than `d`.
    pub fn ancestor_at_depth(&self, id: NodeId, d: usize) -> Result<NodeId, HierarchyError> {
        let mut cur = self.pos(id)?;
        while self.depth[cur] > d {
            cur = self.parent[cur].expect("non-root node has a parent");
        }
        Ok(self.ids[cur])
    }

    /// Label remapping `λ(y, d)` for a leaf `y` and depth `d >= 1`.
    pub fn remap_label(&self, y: NodeId, d: usize) -> Result<NodeId, HierarchyError> {
        if !self.is_leaf(y)? {
            return Err(HierarchyError::NotALeaf(y));
        }
        if d == 0 {
            return Err(HierarchyError::InvalidDepth(d));
        }
        self.ancestor_at_depth(y, d)
    }

    /// Leaves below `c` (inclusive when `c` is a leaf), ascending.
    pub fn descendant_leaves(&self, c: NodeId) -> Result<Vec<NodeId>, HierarchyError> {
        let start = self.pos(c)?;
        let mut out = Vec::new();
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            if self.children[n].is_empty() {
                out.push(self.ids[n]);
            }
            stack.extend(self.children[n].iter().copied());
        }
        out.sort();
        Ok(out)
    }

    /// The child of `c` on the path toward `descendant`, if `descendant` lies strictly below `c`.
    pub fn child_toward(
        &self,
        c: NodeId,
        descendant: NodeId,
    ) -> Result<Option<NodeId>, HierarchyError> {
        let target = self.pos(c)?;
        let mut cur = self.pos(descendant)?;
        if self.depth[cur] <= self.depth[target] {
            return Ok(None);
        }
        while self.depth[cur] > self.depth[target] + 1 {
            cur = self.parent[cur].expect("non-root node has a parent");
        }
        Ok((self.parent[cur] == Some(target)).then(|| self.ids[cur]))
    }

    /// Node records in ascending id order, suitable for serialization.
    pub fn raw_nodes(&self) -> Vec<RawNode> {
        (0..self.len())
            .map(|i| RawNode {
                id: self.ids[i],
                name: self.names[i].clone(),
                parent: self.parent[i].map(|p| self.ids[p]),
            })
            .collect()
    }

    /// Finds a node by its exact name.
    pub fn find_by_name(&self, name: &str) -> Option<NodeId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.ids[i])
    }

    /// Number of nodes at each depth, index = depth.
    pub fn nodes_per_depth(&self) -> Vec<usize> {
        let mut out = vec![0; self.max_depth + 1];
        for &d in &self.depth {
            out[d] += 1;
        }
        out
    }

    pub(crate) fn children_pos(&self, pos: usize) -> &[usize] {
        &self.children[pos]
    }

    pub(crate) fn depth_pos(&self, pos: usize) -> usize {
        self.depth[pos]
    }

    pub(crate) fn parent_pos(&self, pos: usize) -> Option<usize> {
        self.parent[pos]
    }

    pub(crate) fn root_pos(&self) -> usize {
        self.root
    }
}

/// Pairwise hierarchical distances between all nodes, indexed by position.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<u32>,
}

impl DistanceMatrix {
    pub fn new(h: &Hierarchy) -> Self {
        let n = h.len();
        let mut data = vec![0u32; n * n];
        for a in 0..n {
            for b in (a + 1)..n {
                let d = h.dist_pos(a, b);
                data[a * n + b] = d;
                data[b * n + a] = d;
            }
        }
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> u32 {
        self.data[a * self.n + b]
    }

    pub fn row(&self, a: usize) -> &[u32] {
        &self.data[a * self.n..(a + 1) * self.n]
    }
}

/// Groups node ids by depth; handy for reports.
pub fn nodes_by_depth(h: &Hierarchy) -> BTreeMap<usize, Vec<NodeId>> {
    let mut out: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for (i, &id) in h.ids.iter().enumerate() {
        out.entry(h.depth[i]).or_default().push(id);
    }
    out
}
