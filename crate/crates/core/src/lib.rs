//! Feature-space clustering engine and benchmark toolkit.
//!
//! Works on precomputed embeddings: spherical k-means, multi-head
//! self-distillation clustering (TEMI and SCAN-style objectives),
//! hierarchy-driven benchmark generation, zero-shot label refinement and a
//! Hungarian-matched, calibration-aware evaluation suite.

pub mod assignment;
pub mod benchmark;
pub mod error;
pub mod heads;
pub mod kmeans;
pub mod linalg;
pub mod metrics;
pub mod neighbors;
pub mod refine;
pub mod store;
pub mod synth;
pub mod tree;

pub use assignment::ClusterAssignment;
pub use error::{Error, Result};
pub use store::{ClassRemap, Dataset, DatasetManifest, FeatureMatrix, LabelVector, MultiLabelSets, SimilarityMatrix, Split};
pub use heads::{HeadBank, Objective, TrainConfig};
pub use kmeans::{Centroids, KMeansConfig};
pub use neighbors::NeighborTable;
pub use refine::{HzrMode, RefinementTrace, Restriction};
pub use tree::SemanticTree;

/// Child seed for a named substream of `root`.
///
/// Stages draw from `derive_seed(root, stage_name)` so adding a stage never
/// shifts the draws of another one.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
