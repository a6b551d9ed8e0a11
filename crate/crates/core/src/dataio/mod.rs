//! File formats, manifests, synthetic shapes and checkpoints.

mod checkpoint;
mod cloud;
mod manifest;
mod synthetic;

pub use checkpoint::{name_matches, Checkpoint};
pub use cloud::{decode_cloud, encode_cloud, read_cloud, read_points, write_cloud, write_labeled_points, write_points};
pub use manifest::{split_counts, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
pub use synthetic::{gen_synthetic, gen_synthetic_named, sample_surface, ShapeClass, TORUS_MAJOR, TORUS_MINOR};
