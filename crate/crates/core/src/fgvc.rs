//! Bundled FGVC-Aircraft metadata: the manufacturer / family / variant tree
//! and a 20-variant held-out list.

use crate::hierarchy::{Hierarchy, HierarchyError, NodeId, SplitSpec};
use crate::io::{read_hierarchy_from, IoError};

pub const HIERARCHY_JSON: &str = include_str!("../data/fgvc_aircraft/hierarchy.json");
pub const OOD_ROOTS_JSON: &str = include_str!("../data/fgvc_aircraft/ood_roots.json");
/// Held-out variant names, one per line.
pub const OOD_CLASSES_TXT: &str = include_str!("../data/fgvc_aircraft/ood_classes.txt");

pub fn hierarchy() -> Hierarchy {
    read_hierarchy_from(HIERARCHY_JSON.as_bytes()).expect("bundled hierarchy is valid")
}

pub fn ood_spec() -> SplitSpec {
    serde_json::from_str(OOD_ROOTS_JSON).expect("bundled split is valid")
}

pub fn ood_class_names() -> Vec<&'static str> {
    OOD_CLASSES_TXT
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

/// Looks up leaves by name. Family and variant names can coincide, so only
/// leaves are searched.
pub fn resolve_leaf_names(h: &Hierarchy, names: &[&str]) -> Result<Vec<NodeId>, IoError> {
    names
        .iter()
        .map(|&n| {
            h.leaves()
                .find(|&l| h.name(l).map(|s| s == n).unwrap_or(false))
                .ok_or_else(|| HierarchyError::InvalidSpec(format!("no leaf named '{n}'")).into())
        })
        .collect()
}
