//! Hierarchy-aware multi-label pixel classification.
//!
//! A class taxonomy is a rooted tree. Every pixel carries one score per node
//! and its label is a root-to-leaf path. The crate provides the tree
//! structure, coherence checks and score propagation, flat and tree-aware
//! losses with analytic gradients, a tree-triplet embedding objective, path
//! decoding with per-level mIoU, and a small synthetic training harness.

pub mod coherence;
pub mod config;
pub mod decode;
pub mod embedding;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod losses;
pub mod report;
pub mod synthetic;
pub mod taxonomy;
pub mod train;

pub use error::{Error, Result, TaxonomyError};
pub use field::{LabelField, ScoreField, IGNORE};
pub use taxonomy::{parse_taxonomy, ClassHierarchy};

/// Small three-level taxonomy bundled for the toy harness.
pub const TOY_TAXONOMY: &str = include_str!("../taxonomies/toy_3level.tax");
