use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::geometry::{augment, crop_view, patchify, subsample, PatchSet, PointCloud};
use crate::model::patch_tensors;
use crate::numerics::Tensor;

use super::TrainConfig;

/// Independent generator for a named purpose, keyed by two counters
/// (typically step and item index).
pub fn stream_rng(seed: u64, stream: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Patchified global and local crops of one cloud.
#[derive(Clone, Debug)]
pub struct CloudViews {
    pub globals: Vec<PatchSet>,
    pub locals: Vec<PatchSet>,
}

/// Subsample, then per view: crop, augment, patchify.
pub fn build_views(cloud: &PointCloud, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<CloudViews> {
    let m_random = cfg.oversample.min(cloud.len());
    let m_fps = cfg.points.min(m_random);
    let base = subsample(cloud, m_random, m_fps, rng)?;
    let mut view = |frac: [f64; 2], [p, k]: [usize; 2]| -> Result<PatchSet> {
        let crop = crop_view(&base, frac, cfg.crop_mode, rng)?;
        let crop = augment(&crop, &cfg.augment, rng);
        patchify(&crop, p, k, rng)
    };
    let globals = (0..cfg.n_global_views)
        .map(|_| view(cfg.global_frac, cfg.patches_global))
        .collect::<Result<_>>()?;
    let locals = (0..cfg.n_local_views)
        .map(|_| view(cfg.local_frac, cfg.patches_local))
        .collect::<Result<_>>()?;
    Ok(CloudViews { globals, locals })
}

/// Views of a whole batch as stacked tensors, cloud-major.
pub struct BatchViews {
    pub batch: usize,
    /// `[b * g, p, k, 3]` and `[b * g, p, 3]`.
    pub global_groups: Tensor<f32>,
    pub global_centers: Tensor<f32>,
    pub local_groups: Option<Tensor<f32>>,
    pub local_centers: Option<Tensor<f32>>,
    pub global_sets: Vec<PatchSet>,
}

/// Views for every cloud of a batch. Each cloud draws from its own stream
/// keyed by `(step, position)`, so the result does not depend on thread
/// count.
pub fn batch_views(clouds: &[PointCloud], cfg: &TrainConfig, step: u64) -> Result<BatchViews> {
    let views: Vec<CloudViews> = clouds
        .par_iter()
        .enumerate()
        .map(|(i, c)| build_views(c, cfg, &mut stream_rng(cfg.seed, "views", step, i as u64)))
        .collect::<Result<_>>()?;
    let global_sets: Vec<PatchSet> = views.iter().flat_map(|v| v.globals.iter().cloned()).collect();
    let local_sets: Vec<PatchSet> = views.iter().flat_map(|v| v.locals.iter().cloned()).collect();
    let (global_groups, global_centers) = patch_tensors(&global_sets)?;
    let (local_groups, local_centers) = if local_sets.is_empty() {
        (None, None)
    } else {
        let (g, c) = patch_tensors(&local_sets)?;
        (Some(g), Some(c))
    };
    Ok(BatchViews {
        batch: clouds.len(),
        global_groups,
        global_centers,
        local_groups,
        local_centers,
        global_sets,
    })
}
