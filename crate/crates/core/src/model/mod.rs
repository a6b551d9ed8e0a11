//! Patch embedder, transformer encoder, projector and mask generator.

mod config;
mod nets;
mod params;

pub use config::{EncoderConfig, FfnKind, MaskGenConfig, ModelConfig, ProjectorConfig};
pub use nets::{
    aggregate_features, count, embed_patches, encode, encoder_specs, generate_masks, l2_normalize, linear,
    mask_gen_specs, mask_token_spec, patch_embedding, patch_tensors, position_embedding, prepend_cls, project,
    projector_head, projector_specs, projector_trunk, student_specs, transformer, Encoded, Head, Masks, Mode,
    TokenSequence,
};
pub use params::{Bound, Init, ParamSpec, ParamStore};

/// Parameter counts of the encoder (embedder, position MLP, CLS token and
/// transformer) and of the mask generator.
pub fn parameter_counts(cfg: &ModelConfig) -> (usize, usize) {
    (count(&encoder_specs(cfg)), count(&mask_gen_specs(&cfg.mask_gen)))
}
