//! Losses, masking, teacher centering/sharpening and the EMA update.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamStore, TokenSequence};
use crate::numerics::{kernels, Graph, Real, Tensor, Var};

/// Clamp on the sine argument of the sparsity penalty.
pub const SPARSITY_EPS: f64 = 1e-3;

/// Blend mask tokens into `[s, p, d]` CLS-free tokens with `[s, n, p]`
/// masks: `(1 - m) x + m x_mask`. Returns `[s * n, p, d]`, mask-major
/// within each sequence.
pub fn apply_mask<T: Real>(g: &mut Graph<T>, seq: TokenSequence, m: Var, mask_token: Var) -> Result<TokenSequence> {
    if seq.has_cls {
        return Err(Error::contract("masks apply before the CLS token is prepended"));
    }
    let xs = g.shape(seq.x).to_vec();
    let ms = g.shape(m).to_vec();
    if ms.len() != 3 || ms[0] != xs[0] || ms[2] != xs[1] {
        return Err(Error::arg(format!("mask shape {ms:?} does not fit tokens {xs:?}")));
    }
    if g.shape(mask_token) != [xs[2]] {
        return Err(Error::arg(format!(
            "mask token shape {:?} does not match width {}",
            g.shape(mask_token),
            xs[2]
        )));
    }
    let (s, n, p, d) = (xs[0], ms[1], xs[1], xs[2]);
    let x = g.reshape(seq.x, &[s, 1, p, d])?;
    let diff = g.sub(mask_token, x)?;
    let m4 = g.reshape(m, &[s, n, p, 1])?;
    let shift = g.mul(m4, diff)?;
    let out = g.add(x, shift)?;
    let out = g.reshape(out, &[s * n, p, d])?;
    Ok(TokenSequence { x: out, ..seq })
}

/// `(1/N) sum_i 1 / sin(pi/p sum_j m_ij)` averaged over the leading batch
/// axis of `[s, n, p]` masks.
pub fn sparsity_loss<T: Real>(g: &mut Graph<T>, m: Var) -> Result<Var> {
    let p = *g.shape(m).last().ok_or_else(|| Error::arg("empty mask shape"))?;
    let last = g.shape(m).len() - 1;
    let rows = g.sum_axis(m, last)?;
    let arg = g.scale(rows, T::of(PI / p as f64));
    let arg = g.clamp(arg, T::of(SPARSITY_EPS), T::of(PI - SPARSITY_EPS));
    let s = g.sin(arg);
    let inv = g.recip(s);
    Ok(g.mean(inv))
}

/// `(1/N^2) sum_i sum_k (1 - cos(m_i, m_k))` averaged over the batch axis.
pub fn diversity_loss<T: Real>(g: &mut Graph<T>, m: Var) -> Result<Var> {
    let shape = g.shape(m).to_vec();
    if shape.len() != 3 {
        return Err(Error::arg(format!("masks must be [s, n, p], got {shape:?}")));
    }
    let u = crate::model::l2_normalize(g, m)?;
    let ut = g.transpose(u)?;
    let gram = g.matmul(u, ut)?;
    let mean = g.mean(gram);
    let neg = g.neg(mean);
    Ok(g.add_scalar(neg, T::one()))
}

/// `log softmax(logits / temp)` along the last axis, with the log clamped.
pub fn student_log_probs<T: Real>(g: &mut Graph<T>, logits: Var, temp: f64) -> Result<Var> {
    let last = g.shape(logits).len() - 1;
    let z = g.scale(logits, T::of(1.0 / temp));
    let p = g.softmax(z, last)?;
    Ok(g.log(p))
}

/// Mean cross-entropy `-sum_k h_k log q_k` over every row of `log_q`
/// (`[..., K]`). `teacher` broadcasts against `log_q`. With `weights`
/// (one per row of `log_q`), rows are averaged by weight instead.
pub fn mpm_loss<T: Real>(g: &mut Graph<T>, log_q: Var, teacher: Var, weights: Option<&Tensor<T>>) -> Result<Var> {
    let shape = g.shape(log_q).to_vec();
    let last = shape.len() - 1;
    let prod = g.mul(teacher, log_q)?;
    if g.shape(prod) != shape {
        return Err(Error::Shape {
            op: "mpm_loss",
            lhs: g.shape(teacher).to_vec(),
            rhs: shape,
        });
    }
    let ce = g.sum_axis(prod, last)?;
    match weights {
        None => {
            let m = g.mean(ce);
            Ok(g.neg(m))
        }
        Some(w) => {
            if w.shape() != g.shape(ce) {
                return Err(Error::Shape {
                    op: "mpm_loss weights",
                    lhs: w.shape().to_vec(),
                    rhs: g.shape(ce).to_vec(),
                });
            }
            let total = w.sum();
            let wv = g.constant(w.clone());
            let weighted = g.mul(ce, wv)?;
            let s = g.sum(weighted);
            let scale = if total > T::zero() { -T::one() / total } else { T::zero() };
            Ok(g.scale(s, scale))
        }
    }
}

/// A student view paired against a teacher global view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentView {
    Local(usize),
    Global(usize),
}

/// Every `(teacher global, student view)` pair: each teacher global
/// against every local view and every other global view.
pub fn cls_pairs(n_global: usize, n_local: usize) -> Result<Vec<(usize, StudentView)>> {
    if n_global < 1 {
        return Err(Error::config("at least one global view is required"));
    }
    let mut out = Vec::new();
    for t in 0..n_global {
        out.extend((0..n_local).map(|l| (t, StudentView::Local(l))));
        out.extend((0..n_global).filter(|&s| s != t).map(|s| (t, StudentView::Global(s))));
    }
    Ok(out)
}

/// Mean CLS cross-entropy over [`cls_pairs`].
///
/// * `teacher`: `[b, g, K]` teacher probabilities (constant).
/// * `local`: `[b, l, K]` student log-probabilities of local views.
/// * `global`: `[b, g, v, K]` student log-probabilities of the global
///   views, `v` variants each (the masked copies); a pair against a global
///   view averages over its variants.
pub fn cls_loss<T: Real>(g: &mut Graph<T>, teacher: Var, local: Option<Var>, global: Var) -> Result<Var> {
    let ts = g.shape(teacher).to_vec();
    let gs = g.shape(global).to_vec();
    if ts.len() != 3 || gs.len() != 4 || gs[0] != ts[0] || gs[1] != ts[1] || gs[3] != ts[2] {
        return Err(Error::Shape {
            op: "cls_loss",
            lhs: ts,
            rhs: gs,
        });
    }
    let (b, n_global, k) = (ts[0], ts[1], ts[2]);
    let n_local = match local {
        Some(l) => {
            let ls = g.shape(l);
            if ls.len() != 3 || ls[0] != b || ls[2] != k {
                return Err(Error::Shape {
                    op: "cls_loss",
                    lhs: ts,
                    rhs: ls.to_vec(),
                });
            }
            ls[1]
        }
        None => 0,
    };
    let pairs = cls_pairs(n_global, n_local)?;
    if pairs.is_empty() {
        return Err(Error::config("CLS loss needs at least two views"));
    }
    let variants = gs[2];
    let mut terms = Vec::new();
    for t in 0..n_global {
        let tg = g.narrow(teacher, 1, t, 1)?;
        if let Some(l) = local.filter(|_| n_local > 0) {
            let prod = g.mul(tg, l)?;
            terms.push(g.sum(prod));
        }
        for s in (0..n_global).filter(|&s| s != t) {
            let sv = g.narrow(global, 1, s, 1)?;
            let sv = g.reshape(sv, &[b, variants, k])?;
            let prod = g.mul(tg, sv)?;
            let total = g.sum(prod);
            terms.push(g.scale(total, T::one() / T::of(variants as f64)));
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, -T::one() / T::of((b * pairs.len()) as f64)))
}

/// Per-step scalar losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mpm: f64,
    pub l_cls: f64,
    pub l_spar: f64,
    pub l_div: f64,
    pub l_encoder_total: f64,
    pub l_mask_total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_mpm, self.l_cls, self.l_spar, self.l_div].iter().all(|v| v.is_finite())
    }
}

/// Encoder objective `l_mpm + l_cls` and mask objective
/// `alpha l_spar + beta l_div - l_mpm - l_cls`.
pub fn combine_losses(l_mpm: f64, l_cls: f64, l_spar: f64, l_div: f64, alpha: f64, beta: f64) -> LossReport {
    LossReport {
        l_mpm,
        l_cls,
        l_spar,
        l_div,
        l_encoder_total: l_mpm + l_cls,
        l_mask_total: alpha * l_spar + beta * l_div - l_mpm - l_cls,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Cls,
    Patch,
}

/// Running teacher centers and temperatures.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub center_cls: Vec<f32>,
    pub center_patch: Vec<f32>,
    pub center_momentum: f64,
    pub teacher_temp: f64,
    pub student_temp: f64,
}

impl DistillState {
    pub fn new(prototypes: usize, center_momentum: f64, teacher_temp: f64, student_temp: f64) -> Self {
        Self {
            center_cls: vec![0.0; prototypes],
            center_patch: vec![0.0; prototypes],
            center_momentum,
            teacher_temp,
            student_temp,
        }
    }

    fn center(&self, which: Stream) -> &[f32] {
        match which {
            Stream::Cls => &self.center_cls,
            Stream::Patch => &self.center_patch,
        }
    }

    /// `softmax((logits - center) / teacher_temp)` row-wise over the last
    /// axis.
    pub fn sharpen(&self, logits: &Tensor<f32>, which: Stream) -> Result<Tensor<f32>> {
        let c = self.center(which);
        let k = *logits.shape().last().unwrap_or(&0);
        if k != c.len() {
            return Err(Error::Shape {
                op: "sharpen",
                lhs: logits.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        let inv = (1.0 / self.teacher_temp) as f32;
        let mut z = logits.clone();
        for row in z.data_mut().chunks_mut(k) {
            for (v, &ci) in row.iter_mut().zip(c) {
                *v = (*v - ci) * inv;
            }
        }
        let last = z.ndim() - 1;
        Ok(kernels::softmax(&z, last))
    }

    /// `center <- momentum * center + (1 - momentum) * mean_rows(logits)`.
    pub fn update_center(&mut self, logits: &Tensor<f32>, which: Stream) {
        let mom = self.center_momentum;
        let c = match which {
            Stream::Cls => &mut self.center_cls,
            Stream::Patch => &mut self.center_patch,
        };
        let k = c.len();
        let rows = logits.numel() / k.max(1);
        if rows == 0 {
            return;
        }
        let mut mean = vec![0.0f64; k];
        for row in logits.data().chunks(k) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        for (ci, m) in c.iter_mut().zip(mean) {
            *ci = (mom * *ci as f64 + (1.0 - mom) * m / rows as f64) as f32;
        }
    }
}

/// Mean Shannon entropy (nats) of the probability rows of `probs`.
pub fn mean_entropy(probs: &Tensor<f32>) -> f64 {
    let k = *probs.shape().last().unwrap_or(&1);
    let rows = probs.numel() / k.max(1);
    let total: f64 = probs
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -(p as f64) * (p as f64).ln())
        .sum();
    total / rows.max(1) as f64
}

/// Linear ramp from `start` to `end` over the first `warmup_frac` of
/// training, constant afterwards.
pub fn teacher_temperature(step: usize, total: usize, start: f64, end: f64, warmup_frac: f64) -> f64 {
    let ramp = (warmup_frac * total as f64).round();
    if ramp <= 0.0 || step as f64 >= ramp {
        return end;
    }
    start + (end - start) * step as f64 / ramp
}

/// `teacher <- lambda teacher + (1 - lambda) student` for every shared
/// tensor.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("EMA weight {lambda} outside [0, 1]")));
    }
    if teacher.len() != student.len() || teacher.names().zip(student.names()).any(|(a, b)| a != b) {
        return Err(Error::contract("teacher and student parameter names differ"));
    }
    let (l, r) = (lambda as f32, (1.0 - lambda) as f32);
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        if s.shape() != t.shape() {
            return Err(Error::contract(format!("{name}: teacher and student shapes differ")));
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = l * *tv + r * sv;
        }
    }
    Ok(())
}
