//! Hierarchical out-of-distribution classification.
//!
//! A probabilistic classifier trained at every depth of a class hierarchy is
//! turned into a distribution over the hierarchy extended with one OOD leaf per
//! internal node. Predictions can land on any node, so a novel class is
//! reported at the closest known ancestor.

pub mod conditionals;
pub mod fgvc;
pub mod hierarchy;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod synthetic;
