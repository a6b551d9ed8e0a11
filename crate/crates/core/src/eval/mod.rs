//! Frozen-feature evaluation, baseline masks and mask export.

mod export;
mod features;
mod fewshot;
mod masks;
mod probe;

pub use export::{export_masks, MaskExporter};
pub use features::{canonical_patches, canonical_start, extract_features, FeatureExtractor};
pub use fewshot::{fewshot_eval, sample_episode, Episode, FewShotResult};
pub use masks::{baseline_masks, masked_count, BaselineKind};
pub use probe::{fit_softmax, linear_probe, mean_std, standardizer, ProbeConfig, ProbeResult, Softmax};

/// `f32` feature rows widened for the probe.
pub fn widen(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}
