use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{knn_indices, Point};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Random,
    Block,
}

/// Number of masked patches for ratio `r` over `p` patches.
pub fn masked_count(r: f64, p: usize) -> usize {
    ((r * p as f64).ceil() as usize).clamp(1, p)
}

/// A binary mask over the patches with the given `centers`. The ratio is
/// drawn from `ratio_range`; `Random` picks that many patches uniformly,
/// `Block` picks the patches whose centers are nearest a random anchor
/// patch (the anchor included).
pub fn baseline_masks<R: Rng + ?Sized>(
    kind: BaselineKind,
    centers: &[Point],
    ratio_range: [f64; 2],
    rng: &mut R,
) -> Result<Vec<f32>> {
    let [lo, hi] = ratio_range;
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::arg(format!("mask ratio range must lie inside (0, 1), got [{lo}, {hi}]")));
    }
    let p = centers.len();
    if p == 0 {
        return Err(Error::arg("no patches to mask"));
    }
    let r = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let count = masked_count(r, p);
    let chosen = match kind {
        BaselineKind::Random => sample(rng, p, count).into_vec(),
        BaselineKind::Block => {
            let anchor = rng.gen_range(0..p);
            knn_indices(centers, &centers[anchor], count)
        }
    };
    let mut m = vec![0.0; p];
    for i in chosen {
        m[i] = 1.0;
    }
    Ok(m)
}
