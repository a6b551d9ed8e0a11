use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::trainer::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            tol: 1e-5,
            max_iter: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub accuracies: Vec<f64>,
    pub iterations: Vec<usize>,
    /// `confusion[true][predicted]`, summed over seeds.
    pub confusion: Vec<Vec<usize>>,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
}

/// Per-dimension mean and standard deviation of `rows`. Constant
/// dimensions get unit scale.
pub fn standardizer(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std = var
        .into_iter()
        .map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, std)
}

fn apply(rows: &[Vec<f64>], mean: &[f64], std: &[f64]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect())
        .collect()
}

/// Multinomial logistic regression, weights `[c][d]` plus biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Softmax {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Softmax {
    fn probs(&self, x: &[f64], out: &mut [f64]) {
        for (o, (w, b)) in out.iter_mut().zip(self.w.iter().zip(&self.b)) {
            *o = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        }
        let mx = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for o in out.iter_mut() {
            *o = (*o - mx).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut p = vec![0.0; self.b.len()];
        self.probs(x, &mut p);
        (0..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    }

    /// Mean cross-entropy plus `l2/2 |W|^2`, and its gradient.
    pub fn objective(&self, x: &[Vec<f64>], y: &[usize], l2: f64) -> (f64, Softmax) {
        let (c, d) = (self.b.len(), self.w[0].len());
        let n = x.len() as f64;
        let mut grad = Softmax {
            w: self.w.iter().map(|w| w.iter().map(|v| l2 * v).collect()).collect(),
            b: vec![0.0; c],
        };
        let mut loss = 0.5 * l2 * self.w.iter().flatten().map(|v| v * v).sum::<f64>();
        let mut p = vec![0.0; c];
        for (xi, &yi) in x.iter().zip(y) {
            self.probs(xi, &mut p);
            loss -= p[yi].max(1e-300).ln() / n;
            for k in 0..c {
                let r = (p[k] - if k == yi { 1.0 } else { 0.0 }) / n;
                grad.b[k] += r;
                let gw = &mut grad.w[k];
                for j in 0..d {
                    gw[j] += r * xi[j];
                }
            }
        }
        (loss, grad)
    }

    fn norm2(&self) -> f64 {
        self.w.iter().flatten().chain(&self.b).map(|v| v * v).sum()
    }

    /// `self + a * other`.
    fn axpy(&self, a: f64, other: &Softmax) -> Softmax {
        Softmax {
            w: self
                .w
                .iter()
                .zip(&other.w)
                .map(|(u, v)| u.iter().zip(v).map(|(p, q)| p + a * q).collect())
                .collect(),
            b: self.b.iter().zip(&other.b).map(|(p, q)| p + a * q).collect(),
        }
    }
}

/// Largest eigenvalue of `X~^T X~ / n`, `X~` being `x` with a ones column.
fn gram_top_eigenvalue(x: &[Vec<f64>]) -> f64 {
    let d = x[0].len() + 1;
    let n = x.len() as f64;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut next = vec![0.0; d];
        for xi in x {
            let dot = xi.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d - 1];
            for (o, a) in next.iter_mut().zip(xi.iter().chain(std::iter::once(&1.0))) {
                *o += dot * a / n;
            }
        }
        let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let done = (norm - lambda).abs() <= 1e-9 * norm;
        lambda = norm;
        v = next.into_iter().map(|a| a / norm).collect();
        if done {
            break;
        }
    }
    lambda
}

/// Accelerated full-batch gradient descent with step `1/L`, where `L`
/// bounds the objective's curvature. Stops when the gradient norm falls
/// below `cfg.tol` or after `cfg.max_iter` iterations.
pub fn fit_softmax(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig, seed: u64) -> (Softmax, usize) {
    let d = x[0].len();
    let mut rng = stream_rng(seed, "probe_init", 0, 0);
    let normal = Normal::new(0.0, 0.01).expect("positive sigma");
    let mut w = Softmax {
        w: (0..classes).map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect()).collect(),
        b: vec![0.0; classes],
    };
    let step = 1.0 / (0.5 * gram_top_eigenvalue(x) + cfg.l2);
    let mut z = w.clone();
    let mut t = 1.0f64;
    let mut prev_loss = f64::INFINITY;
    for it in 0..cfg.max_iter {
        let (loss, gw) = w.objective(x, y, cfg.l2);
        if gw.norm2().sqrt() < cfg.tol {
            return (w, it);
        }
        if loss > prev_loss {
            // Restart the momentum once the objective goes up.
            t = 1.0;
            z = w.clone();
        }
        prev_loss = loss;
        let gz = if z == w { gw } else { z.objective(x, y, cfg.l2).1 };
        let next = z.axpy(-step, &gz);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        z = next.axpy((t - 1.0) / t_next, &next.axpy(-1.0, &w));
        w = next;
        t = t_next;
    }
    (w, cfg.max_iter)
}

/// Standardize with training statistics, fit one classifier per seed and
/// score the test rows.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    n_seeds: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::arg("one label per feature row"));
    }
    if train_x.is_empty() || test_x.is_empty() || n_seeds == 0 {
        return Err(Error::arg("probe needs train rows, test rows and at least one seed"));
    }
    let d = train_x[0].len();
    if d == 0 || train_x.iter().chain(test_x).any(|r| r.len() != d) {
        return Err(Error::arg("feature rows must share a positive width"));
    }
    let classes = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
    let mut seen = vec![false; classes];
    for &yi in train_y {
        seen[yi] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::arg("degenerate probe: the training set has a single class"));
    }
    let (mean, std) = standardizer(train_x);
    let xs = apply(train_x, &mean, &std);
    let xt = apply(test_x, &mean, &std);
    let mut confusion = vec![vec![0; classes]; classes];
    let mut accuracies = Vec::with_capacity(n_seeds);
    let mut iterations = Vec::with_capacity(n_seeds);
    for seed in 0..n_seeds {
        let (model, iters) = fit_softmax(&xs, train_y, classes, cfg, seed as u64);
        let mut hit = 0;
        for (xi, &yi) in xt.iter().zip(test_y) {
            let pred = model.predict(xi);
            confusion[yi][pred] += 1;
            hit += usize::from(pred == yi);
        }
        accuracies.push(hit as f64 / xt.len() as f64);
        iterations.push(iters);
    }
    let (accuracy_mean, accuracy_std) = mean_std(&accuracies);
    Ok(ProbeResult {
        accuracy_mean,
        accuracy_std,
        accuracies,
        iterations,
        confusion,
        n_train: train_x.len(),
        n_test: test_x.len(),
        n_classes: classes,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl ProbeResult {
    /// Structured text summary.
    pub fn report(&self, label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[{label}]");
        let _ = writeln!(s, "accuracy_mean = {:.6}", self.accuracy_mean);
        let _ = writeln!(s, "accuracy_std = {:.6}", self.accuracy_std);
        let _ = writeln!(s, "n_train = {}", self.n_train);
        let _ = writeln!(s, "n_test = {}", self.n_test);
        let _ = writeln!(s, "n_classes = {}", self.n_classes);
        let rows: Vec<String> = self
            .confusion
            .iter()
            .map(|r| format!("[{}]", r.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")))
            .collect();
        let _ = writeln!(s, "confusion = [{}]", rows.join(", "));
        s
    }

    /// `seed,accuracy,iterations` rows.
    pub fn csv(&self) -> String {
        let mut s = String::from("seed,accuracy,iterations\n");
        for (i, (a, it)) in self.accuracies.iter().zip(&self.iterations).enumerate() {
            let _ = writeln!(s, "{i},{a},{it}");
        }
        s
    }
}
