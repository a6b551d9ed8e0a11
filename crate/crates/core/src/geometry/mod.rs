//! Point-cloud kernels: furthest point sampling, kNN patch grouping, view
//! cropping and augmentation. Everything is brute force over distance
//! matrices; clouds stay in the low thousands of points.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type Point = [f32; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// A raw 3-D point set with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::arg("a point cloud needs at least one point"));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        Ok(Self {
            points,
            label: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let mut c = [0f64; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k] as f64;
            }
        }
        let n = self.points.len() as f64;
        [(c[0] / n) as f32, (c[1] / n) as f32, (c[2] / n) as f32]
    }

    /// Move the centroid to the origin and scale so the farthest point has
    /// unit norm.
    pub fn normalize(&mut self) {
        let c = self.centroid();
        for p in &mut self.points {
            for k in 0..3 {
                p[k] -= c[k];
            }
        }
        let max = self
            .points
            .iter()
            .map(|p| dist2(p, &[0.0; 3]))
            .fold(0f32, f32::max)
            .sqrt();
        if max > 0.0 {
            for p in &mut self.points {
                for v in p.iter_mut() {
                    *v /= max;
                }
            }
        }
    }

    pub fn normalized(mut self) -> Self {
        self.normalize();
        self
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: self.label,
        }
    }
}

/// Greedy furthest point sampling from a fixed start index. Each pick
/// maximizes the minimum distance to the already-selected set; ties go to
/// the lowest index.
pub fn fps_from(points: &[Point], p: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if p == 0 || p > n {
        return Err(Error::arg(format!("fps needs 1 <= p <= n, got p={p}, n={n}")));
    }
    if start >= n {
        return Err(Error::arg(format!("fps start {start} out of range for {n} points")));
    }
    let mut selected = Vec::with_capacity(p);
    let mut min_d = vec![f32::INFINITY; n];
    let mut current = start;
    for _ in 0..p {
        selected.push(current);
        let c = points[current];
        min_d[current] = f32::NEG_INFINITY;
        let mut best = usize::MAX;
        let mut best_d = f32::NEG_INFINITY;
        for (i, (q, md)) in points.iter().zip(min_d.iter_mut()).enumerate() {
            if *md == f32::NEG_INFINITY {
                continue;
            }
            let d = dist2(q, &c);
            if d < *md {
                *md = d;
            }
            if *md > best_d {
                best_d = *md;
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Furthest point sampling with a seeded-uniform start point.
pub fn fps<R: Rng + ?Sized>(cloud: &PointCloud, p: usize, rng: &mut R) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::arg("fps on an empty cloud"));
    }
    let start = rng.gen_range(0..cloud.len());
    fps_from(&cloud.points, p, start)
}

/// Indices of the `k` points nearest to `query`, ascending by distance,
/// ties by lower index.
pub fn knn_indices(points: &[Point], query: &Point, k: usize) -> Vec<usize> {
    let mut order: Vec<(f32, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, q)| (dist2(q, query), i))
        .collect();
    let cmp = |a: &(f32, usize), b: &(f32, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    order.into_iter().map(|(_, i)| i).collect()
}

/// Patches gathered around sampled centers. Group coordinates are stored
/// relative to their center.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    /// `p * k` center-relative points, patch-major.
    pub groups: Vec<Point>,
    pub center_indices: Vec<usize>,
    /// `p * k` indices into the source cloud.
    pub member_indices: Vec<usize>,
    pub k: usize,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.centers.len()
    }

    pub fn group(&self, i: usize) -> &[Point] {
        &self.groups[i * self.k..(i + 1) * self.k]
    }

    pub fn members(&self, i: usize) -> &[usize] {
        &self.member_indices[i * self.k..(i + 1) * self.k]
    }

    /// Fraction of the cloud's points that belong to at least one group.
    pub fn coverage(&self, n_points: usize) -> f64 {
        let mut hit = vec![false; n_points];
        for &i in &self.member_indices {
            hit[i] = true;
        }
        hit.iter().filter(|&&h| h).count() as f64 / n_points as f64
    }
}

pub fn group_knn(cloud: &PointCloud, center_indices: &[usize], k: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::arg(format!("group_knn needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut centers = Vec::with_capacity(center_indices.len());
    let mut groups = Vec::with_capacity(center_indices.len() * k);
    let mut members = Vec::with_capacity(center_indices.len() * k);
    for &ci in center_indices {
        let c = *cloud
            .points
            .get(ci)
            .ok_or_else(|| Error::arg(format!("center index {ci} out of range")))?;
        centers.push(c);
        for i in knn_indices(&cloud.points, &c, k) {
            let q = cloud.points[i];
            groups.push([q[0] - c[0], q[1] - c[1], q[2] - c[2]]);
            members.push(i);
        }
    }
    Ok(PatchSet {
        centers,
        groups,
        center_indices: center_indices.to_vec(),
        member_indices: members,
        k,
    })
}

/// FPS followed by kNN grouping.
pub fn patchify<R: Rng + ?Sized>(
    cloud: &PointCloud,
    num_patches: usize,
    k: usize,
    rng: &mut R,
) -> Result<PatchSet> {
    let centers = fps(cloud, num_patches, rng)?;
    group_knn(cloud, &centers, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// The nearest points around a random anchor.
    #[default]
    Contiguous,
    /// A uniformly random subset of the same size.
    RandomSubset,
}

/// Indices of the cropped subset, in ascending index order.
pub fn crop_indices<R: Rng + ?Sized>(
    cloud: &PointCloud,
    fraction_range: [f64; 2],
    mode: CropMode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let [lo, hi] = fraction_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::arg(format!(
            "crop fraction range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
        )));
    }
    let n = cloud.len();
    let f = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let count = ((f * n as f64).ceil() as usize).clamp(1, n);
    let mut idx = match mode {
        CropMode::Contiguous => {
            let anchor = rng.gen_range(0..n);
            knn_indices(&cloud.points, &cloud.points[anchor], count)
        }
        CropMode::RandomSubset => sample(rng, n, count).into_vec(),
    };
    idx.sort_unstable();
    Ok(idx)
}

/// A random crop covering a fraction in `fraction_range` of the cloud,
/// re-normalized.
pub fn crop_view<R: Rng + ?Sized>(
    cloud: &PointCloud,
    fraction_range: [f64; 2],
    mode: CropMode,
    rng: &mut R,
) -> Result<PointCloud> {
    let idx = crop_indices(cloud, fraction_range, mode, rng)?;
    Ok(cloud.select(&idx).normalized())
}

/// Random similarity jitter applied to training views.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale: [f32; 2],
    pub translate: f32,
    pub jitter_sigma: f32,
    pub jitter_clip: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: [2.0 / 3.0, 1.5],
            translate: 0.2,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            scale: [1.0, 1.0],
            translate: 0.0,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
        }
    }
}

/// Global scale, then translation, then clipped per-point Gaussian jitter.
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, cfg: &AugmentConfig, rng: &mut R) -> PointCloud {
    let [s_lo, s_hi] = cfg.scale;
    let s = if s_lo < s_hi { rng.gen_range(s_lo..s_hi) } else { s_lo };
    let t: Point = if cfg.translate > 0.0 {
        std::array::from_fn(|_| rng.gen_range(-cfg.translate..=cfg.translate))
    } else {
        [0.0; 3]
    };
    let jitter = (cfg.jitter_sigma > 0.0)
        .then(|| Normal::new(0.0f32, cfg.jitter_sigma).expect("positive sigma"));
    let points = cloud
        .points
        .iter()
        .map(|p| {
            std::array::from_fn(|k| {
                let mut v = p[k] * s + t[k];
                if let Some(j) = &jitter {
                    v += j.sample(rng).clamp(-cfg.jitter_clip, cfg.jitter_clip);
                }
                v
            })
        })
        .collect();
    PointCloud {
        points,
        label: cloud.label,
    }
}

/// Uniformly choose `m_random` points without replacement, then reduce
/// them to `m_fps` by furthest point sampling.
pub fn subsample<R: Rng + ?Sized>(
    cloud: &PointCloud,
    m_random: usize,
    m_fps: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    let n = cloud.len();
    if !(1 <= m_fps && m_fps <= m_random && m_random <= n) {
        return Err(Error::arg(format!(
            "subsample needs 1 <= m_fps <= m_random <= n, got {m_fps}, {m_random}, {n}"
        )));
    }
    let mut chosen = sample(rng, n, m_random).into_vec();
    chosen.sort_unstable();
    let pool = cloud.select(&chosen);
    let keep = fps(&pool, m_fps, rng)?;
    Ok(pool.select(&keep))
}
