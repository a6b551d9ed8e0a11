use std::path::Path;

use rayon::prelude::*;

use crate::dataio::Checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{dist2, fps_from, group_knn, PatchSet, PointCloud};
use crate::model::{aggregate_features, embed_patches, encode, encoder_specs, patch_tensors, prepend_cls, Mode};
use crate::model::{ModelConfig, ParamStore};
use crate::numerics::Graph;
use crate::trainer::{stream_rng, TrainConfig};

/// Clouds encoded per graph.
const CHUNK: usize = 32;

/// Index of the point farthest from the centroid, ties to the lowest index.
pub fn canonical_start(cloud: &PointCloud) -> usize {
    let c = cloud.centroid();
    let mut best = (f32::NEG_INFINITY, 0);
    for (i, p) in cloud.points.iter().enumerate() {
        let d = dist2(p, &c);
        if d > best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// FPS down to `points` and patchify, both started from the canonical
/// point. Depends on the point set only, not on its order (barring exact
/// distance ties).
pub fn canonical_patches(cloud: &PointCloud, points: usize, [p, k]: [usize; 2]) -> Result<PatchSet> {
    let cloud = if cloud.len() > points {
        cloud.select(&fps_from(&cloud.points, points, canonical_start(cloud))?)
    } else {
        cloud.clone()
    };
    let centers = fps_from(&cloud.points, p, canonical_start(&cloud))?;
    group_knn(&cloud, &centers, k)
}

/// Frozen encoder used to embed whole clouds.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub params: ParamStore,
    pub model: ModelConfig,
    pub points: usize,
    pub patches: [usize; 2],
}

impl FeatureExtractor {
    /// Freshly initialized encoder from the config's seed.
    pub fn random_init(cfg: &TrainConfig) -> Self {
        let model = cfg.model();
        let params = ParamStore::init(&encoder_specs(&model), &mut stream_rng(cfg.seed, "init", 0, 0));
        Self {
            params,
            model,
            points: cfg.points,
            patches: cfg.patches_global,
        }
    }

    /// Encoder tensors (`encoder.*`) of a training checkpoint.
    pub fn from_checkpoint(cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path, Some("encoder.*"))?;
        let mut fx = Self::random_init(cfg);
        fx.params.import(&ck, "")?;
        Ok(fx)
    }

    pub fn width(&self) -> usize {
        2 * self.model.encoder.embed_dim
    }

    fn encode_chunk(&self, clouds: &[PointCloud]) -> Result<Vec<Vec<f32>>> {
        let sets = clouds
            .iter()
            .map(|c| canonical_patches(c, self.points, self.patches))
            .collect::<Result<Vec<_>>>()?;
        let (groups, centers) = patch_tensors::<f32>(&sets)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let groups = g.constant(groups);
        let centers = g.constant(centers);
        let seq = embed_patches(&mut g, &p, groups, centers)?;
        let seq = prepend_cls(&mut g, &p, seq)?;
        let enc = encode(&mut g, &p, &self.model.encoder, seq, &mut Mode::Eval)?;
        let f = aggregate_features(&mut g, enc.seq)?;
        let w = self.width();
        Ok(g.value(f).data().chunks(w).map(<[f32]>::to_vec).collect())
    }

    /// One `2d`-wide row per cloud.
    pub fn extract(&self, clouds: &[PointCloud]) -> Result<Vec<Vec<f32>>> {
        let chunks = clouds
            .par_chunks(CHUNK)
            .map(|c| self.encode_chunk(c))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Vec<f32>> = chunks.into_iter().flatten().collect();
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("extracted features".into()));
        }
        Ok(rows)
    }
}

pub fn extract_features(clouds: &[PointCloud], extractor: &FeatureExtractor) -> Result<Vec<Vec<f32>>> {
    extractor.extract(clouds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, ShapeClass};
    use rand::seq::SliceRandom;

    fn small() -> TrainConfig {
        TrainConfig::parse(
            "points = 128\noversample = 160\npatches_global = [8, 8]\npatches_local = [4, 8]\nembed_dim = 16\n\
             depth = 1\nheads = 2\nmask_depth = 1\nmask_heads = 2\nembed_hidden = 8\npos_hidden = 8\n\
             proj_hidden = 16\nproj_bottleneck = 8\nprototypes = 16\n",
        )
        .unwrap()
    }

    #[test]
    fn rows_are_deterministic_permutation_invariant_and_scale_sensitive() {
        let fx = FeatureExtractor::random_init(&small());
        let cloud = gen_synthetic(ShapeClass::Torus, 200, 0.01, &mut stream_rng(0, "t", 0, 0)).unwrap();
        let mut shuffled = cloud.points.clone();
        shuffled.shuffle(&mut stream_rng(0, "t", 1, 0));
        let scaled: Vec<_> = cloud.points.iter().map(|p| p.map(|v| v * 0.5)).collect();
        let clouds = [
            cloud.clone(),
            cloud.clone(),
            PointCloud::new(shuffled).unwrap(),
            PointCloud::new(scaled).unwrap(),
        ];
        let rows = fx.extract(&clouds).unwrap();
        assert_eq!(rows[0].len(), 32);
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[0], rows[2]);
        assert_ne!(rows[0], rows[3]);
    }

    #[test]
    fn missing_encoder_tensors_fail_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        Checkpoint::default().save(&path).unwrap();
        assert!(matches!(FeatureExtractor::from_checkpoint(&small(), &path), Err(Error::Integrity(_))));
    }
}
