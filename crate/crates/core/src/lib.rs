//! Causal-intervention toolkit for object-context statistics and
//! visual-commonsense region features.
//!
//! Two layers live here:
//!
//! - A discrete layer over category presence sets: [`annot`] parses
//!   annotation files, [`stats`] turns presence sets into triple
//!   co-occurrence counts and compares the conditional `P(y|x)` with the
//!   backdoor-adjusted `P(y|do(x))`, and [`scm`] provides a structural causal
//!   model whose exact interventional distributions validate the estimators.
//! - A feature layer: [`dict`] builds the confounder dictionary, [`head`] is
//!   the self/context prediction head with analytic gradients and an SGD
//!   trainer, [`ncc`] scores cause-effect direction to filter collider
//!   samples, and [`fmat`] stores region features in a little-endian binary
//!   matrix format.
//!
//! The `vc-intervene` binary wires these into a pipeline.

pub mod annot;
pub mod config;
pub mod dict;
pub mod fmat;
pub mod head;
pub mod linalg;
pub mod manifest;
pub mod ncc;
pub mod probe;
pub mod rng;
pub mod scm;
pub mod stats;

pub use annot::{AnnotationDataset, CategoryTable, ImageRecord, Region};
pub use dict::{ConfounderDictionary, DictVariant};
pub use fmat::{RegionFeatureSet, RegionKey};
pub use head::{HeadOptions, HeadParams, TrainConfig};
pub use linalg::Matrix;
pub use scm::{SceneSample, ScmWorld};
pub use stats::{CoocCounts, ProbTable, TableKind};
