//! Synthetic shape classes used in place of mesh datasets.

use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

pub const TORUS_MAJOR: f32 = 1.0;
pub const TORUS_MINOR: f32 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Torus,
    Plane,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [Self::Sphere, Self::Cube, Self::Torus, Self::Plane];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Cube => "cube",
            Self::Torus => "torus",
            Self::Plane => "plane",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::arg(format!("unknown shape class {s:?}")))
    }
}

/// Points sampled uniformly on the shape's surface, before any noise or
/// normalization. Samples come in antithetic pairs `(p, -p)`; every class is
/// centrally symmetric, so the marginal stays uniform and the centroid of an
/// even-sized sample sits exactly at the shape center.
pub fn sample_surface<R: Rng + ?Sized>(class: ShapeClass, n: usize, rng: &mut R) -> Vec<Point> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let p = sample_one(class, rng);
        out.push(p);
        out.push([-p[0], -p[1], -p[2]]);
    }
    out.truncate(n);
    out
}

fn sample_one<R: Rng + ?Sized>(class: ShapeClass, rng: &mut R) -> Point {
    match class {
        ShapeClass::Sphere => loop {
            let v: [f32; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm > 1e-6 {
                break [v[0] / norm, v[1] / norm, v[2] / norm];
            }
        },
        ShapeClass::Cube => {
            let face = rng.gen_range(0..6);
            let (u, v) = (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, u, v],
                1 => [u, s, v],
                _ => [u, v, s],
            }
        }
        ShapeClass::Torus => {
            // Area element is proportional to R + r cos(phi).
            let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
            let phi = loop {
                let phi: f32 = rng.gen_range(0.0..2.0 * PI);
                let w: f32 = rng.gen_range(0.0..(big + small));
                if w <= big + small * phi.cos() {
                    break phi;
                }
            };
            let theta: f32 = rng.gen_range(0.0..2.0 * PI);
            let ring = big + small * phi.cos();
            [ring * theta.cos(), ring * theta.sin(), small * phi.sin()]
        }
        ShapeClass::Plane => [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), 0.0],
    }
}

/// A normalized cloud of `n_points` surface samples with isotropic
/// Gaussian noise of standard deviation `noise` added before normalizing.
pub fn gen_synthetic<R: Rng + ?Sized>(
    class: ShapeClass,
    n_points: usize,
    noise: f32,
    rng: &mut R,
) -> Result<PointCloud> {
    if n_points < 8 {
        return Err(Error::arg(format!("need at least 8 points, got {n_points}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::arg("noise must be non-negative"));
    }
    let mut points = sample_surface(class, n_points, rng);
    if noise > 0.0 {
        let normal = Normal::new(0.0f32, noise).expect("positive sigma");
        for p in &mut points {
            for v in p.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    Ok(PointCloud::new(points)?.normalized())
}

pub fn gen_synthetic_named<R: Rng + ?Sized>(
    class: &str,
    n_points: usize,
    noise: f32,
    rng: &mut R,
) -> Result<PointCloud> {
    gen_synthetic(class.parse()?, n_points, noise, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_norms_are_unit() {
        let c = gen_synthetic(ShapeClass::Sphere, 2000, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for p in &c.points {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-5, "{n}");
        }
    }

    #[test]
    fn plane_has_rank_two() {
        let c = gen_synthetic(ShapeClass::Plane, 300, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // Covariance of centered coords: third eigenvalue zero means every z
        // is zero after centering (the plane is z = 0).
        assert!(c.points.iter().all(|p| p[2].abs() < 1e-6));
        let var = |k: usize| c.points.iter().map(|p| p[k] * p[k]).sum::<f32>();
        assert!(var(0) > 1.0 && var(1) > 1.0);
    }

    #[test]
    fn torus_tube_radius() {
        let raw = sample_surface(ShapeClass::Torus, 2000, &mut ChaCha8Rng::seed_from_u64(2));
        for p in &raw {
            let ring = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let d = ((ring - TORUS_MAJOR).powi(2) + p[2] * p[2]).sqrt();
            assert!((d - TORUS_MINOR).abs() < 1e-4, "{d}");
        }
    }

    #[test]
    fn unknown_class_is_argument_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(gen_synthetic_named("donut", 16, 0.0, &mut rng), Err(Error::Argument(_))));
        assert!(gen_synthetic(ShapeClass::Cube, 4, 0.0, &mut rng).is_err());
    }

    #[test]
    fn reproducible_with_seed() {
        let a = gen_synthetic(ShapeClass::Torus, 64, 0.01, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = gen_synthetic(ShapeClass::Torus, 64, 0.01, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}
