//! Spatial-embedding lane instance segmentation without a network.
//!
//! Offsets, bandwidths and seed scores are optimized directly per pixel so
//! that each pixel's embedding `e = [x + o^x; y + o^y]` lands on its lane's
//! centroid. The crate provides:
//!
//! - [`field`]: dense fields, coordinate maps, embeddings, instance statistics.
//! - [`losses`]: embedding (Lovász hinge), bandwidth saturation, push and seed
//!   losses with analytic gradients.
//! - [`optimize`]: heavy-ball gradient descent on the field parameters.
//! - [`cluster`]: the seed-then-mask clusterer, a grid-indexed DBSCAN
//!   baseline and instance matching.
//! - [`synth`]: deterministic synthetic lane scenes.
//! - [`metrics`]: point-based lane accuracy, clustering quality and timing.
//! - [`io`]: the `LEF1` field and `LEL1` labeling file formats.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod error;
pub mod field;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optimize;
pub mod synth;

pub use error::{Error, Result};
pub use field::{
    instance_stats, make_coordinate_maps, spatial_embedding, CoordMaps, EmbeddingField, Field, FieldF32, FieldF64,
    InstanceLabeling, InstanceStats,
};
pub use losses::{LossConfig, LossReport, LossWeights};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
