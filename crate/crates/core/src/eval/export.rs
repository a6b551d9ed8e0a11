use std::path::{Path, PathBuf};

use crate::dataio::{write_labeled_points, write_points, Checkpoint};
use crate::error::{Error, Result};
use crate::geometry::{PatchSet, Point, PointCloud};
use crate::model::{embed_patches, encoder_specs, generate_masks, mask_gen_specs, patch_tensors, Mode, ParamStore};
use crate::numerics::Graph;
use crate::trainer::{stream_rng, TrainConfig};

use super::features::canonical_patches;

/// Encoder embedder plus mask generator, loaded for mask inspection.
#[derive(Clone, Debug)]
pub struct MaskExporter {
    pub encoder: ParamStore,
    pub mask_gen: ParamStore,
    pub cfg: TrainConfig,
}

impl MaskExporter {
    pub fn from_checkpoint(cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path, None)?;
        let mut ex = Self::random_init(cfg);
        ex.encoder.import(&ck, "")?;
        ex.mask_gen.import(&ck, "")?;
        Ok(ex)
    }

    pub fn random_init(cfg: &TrainConfig) -> Self {
        let model = cfg.model();
        Self {
            encoder: ParamStore::init(&encoder_specs(&model), &mut stream_rng(cfg.seed, "init", 0, 0)),
            mask_gen: ParamStore::init(&mask_gen_specs(&model.mask_gen), &mut stream_rng(cfg.seed, "init", 1, 0)),
            cfg: cfg.clone(),
        }
    }

    /// Patches of `cloud` and the index of the winning mask of each patch.
    pub fn assign(&self, cloud: &PointCloud) -> Result<(PatchSet, Vec<usize>)> {
        let model = self.cfg.model();
        let set = canonical_patches(cloud, self.cfg.points, self.cfg.patches_global)?;
        let (groups, centers) = patch_tensors::<f32>(std::slice::from_ref(&set))?;
        let mut g = Graph::<f32>::new();
        let enc = self.encoder.bind(&mut g, false);
        let mg = self.mask_gen.bind(&mut g, false);
        let groups = g.constant(groups);
        let centers = g.constant(centers);
        let seq = embed_patches(&mut g, &enc, groups, centers)?;
        let masks = generate_masks(&mut g, &mg, &model.mask_gen, seq, &mut Mode::Eval)?;
        let m = g.value(masks.m);
        let (n, p) = (m.shape()[1], m.shape()[2]);
        let winners = (0..p)
            .map(|j| (0..n).fold(0, |best, i| if m.data()[i * p + j] > m.data()[best * p + j] { i } else { best }))
            .collect();
        Ok((set, winners))
    }
}

/// Write `{stem}_mask{i}.pcam` for every mask and `{stem}_masks.pcam`
/// holding every grouped point once with the id of the first patch that
/// contains it. Points of the exported cloud are those of the patchified
/// cloud (after FPS down to the configured count).
pub fn export_masks(cloud: &PointCloud, exporter: &MaskExporter, out: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    let out = out.as_ref();
    std::fs::create_dir_all(out)?;
    let n = exporter.cfg.n_masks;
    if n > u8::MAX as usize + 1 {
        return Err(Error::arg("at most 256 masks fit the per-point id"));
    }
    let (set, winners) = exporter.assign(cloud)?;
    let mut owner: Vec<Option<(usize, Point)>> = Vec::new();
    for (j, &w) in winners.iter().enumerate() {
        for (&idx, rel) in set.members(j).iter().zip(set.group(j)) {
            if idx >= owner.len() {
                owner.resize(idx + 1, None);
            }
            if owner[idx].is_none() {
                let c = set.centers[j];
                owner[idx] = Some((w, [rel[0] + c[0], rel[1] + c[1], rel[2] + c[2]]));
            }
        }
    }
    let assigned: Vec<(usize, Point)> = owner.into_iter().flatten().collect();
    let mut paths = Vec::with_capacity(n + 1);
    for i in 0..n {
        let pts: Vec<Point> = assigned.iter().filter(|(w, _)| *w == i).map(|(_, p)| *p).collect();
        let path = out.join(format!("{stem}_mask{i}.pcam"));
        write_points(&path, &pts)?;
        paths.push(path);
    }
    let pts: Vec<Point> = assigned.iter().map(|(_, p)| *p).collect();
    let ids: Vec<u8> = assigned.iter().map(|(w, _)| *w as u8).collect();
    let path = out.join(format!("{stem}_masks.pcam"));
    write_labeled_points(&path, &pts, &ids)?;
    paths.push(path);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, read_points, ShapeClass};

    #[test]
    fn files_partition_the_grouped_points() {
        let cfg = TrainConfig::parse(
            "points = 128\noversample = 160\npatches_global = [8, 16]\npatches_local = [4, 8]\nembed_dim = 16\n\
             depth = 1\nheads = 2\nmask_depth = 1\nmask_heads = 2\nembed_hidden = 8\npos_hidden = 8\n\
             proj_hidden = 16\nproj_bottleneck = 8\nprototypes = 16\n",
        )
        .unwrap();
        let ex = MaskExporter::random_init(&cfg);
        let cloud = gen_synthetic(ShapeClass::Cube, 300, 0.0, &mut stream_rng(0, "c", 0, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = export_masks(&cloud, &ex, dir.path(), "cube").unwrap();
        assert_eq!(paths.len(), 4);
        let (all, ids) = read_points(&paths[3]).unwrap();
        let ids = ids.unwrap();
        assert!(ids.iter().all(|&i| i < 3));
        let mut parts = 0;
        for (i, p) in paths[..3].iter().enumerate() {
            let (pts, none) = read_points(p).unwrap();
            assert!(none.is_none());
            assert_eq!(pts.len(), ids.iter().filter(|&&v| v as usize == i).count());
            parts += pts.len();
        }
        assert_eq!(parts, all.len());
        let (set, _) = ex.assign(&cloud).unwrap();
        let mut members = set.member_indices.clone();
        members.sort_unstable();
        members.dedup();
        assert_eq!(members.len(), all.len());
    }
}
