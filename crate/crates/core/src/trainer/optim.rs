use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::dataio::Checkpoint;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::Tensor;

/// Linear warmup to `lr_max`, then cosine decay to `lr_min` with the time
/// axis bent by the k-decay exponent `k`.
pub fn lr_schedule(step: usize, total: usize, lr_max: f64, lr_min: f64, warmup: usize, k: f64) -> Result<f64> {
    if warmup >= total {
        return Err(Error::config(format!("warmup {warmup} must be shorter than {total} steps")));
    }
    if step > total {
        return Err(Error::arg(format!("step {step} beyond {total}")));
    }
    if step < warmup {
        return Ok(lr_max * step as f64 / warmup as f64);
    }
    let t = (step - warmup) as f64;
    let big_t = (total - warmup) as f64;
    let ratio = t.powf(k) / big_t.powf(k);
    Ok(lr_min + (lr_max - lr_min) / 2.0 * (1.0 + (PI * ratio).cos()))
}

/// Teacher EMA weight, annealed from `lambda0` to 1 along a half cosine.
pub fn momentum_schedule(step: usize, total: usize, lambda0: f64) -> f64 {
    let t = step.min(total) as f64 / total.max(1) as f64;
    1.0 - (1.0 - lambda0) * (1.0 + (PI * t).cos()) / 2.0
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        Self {
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter in `params` that has a gradient.
    /// Parameters are first shrunk by `1 - lr * wd`, then moved by the
    /// bias-corrected moment ratio.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = match (self.m.get_mut(name), self.v.get_mut(name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::contract(format!("{name} has no optimizer state"))),
            };
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i] as f64;
                let mi = BETA1 * md[i] as f64 + (1.0 - BETA1) * gi;
                let vi = BETA2 * vd[i] as f64 + (1.0 - BETA2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
                pd[i] = (pd[i] * decay) - update as f32;
            }
        }
        Ok(())
    }

    pub fn export(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (k, t) in &self.m {
            ckpt.tensors.insert(format!("{prefix}m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            ckpt.tensors.insert(format!("{prefix}v.{k}"), t.clone());
        }
        ckpt.meta.insert(format!("{prefix}step"), self.step.to_string());
    }

    pub fn import(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for (kind, map) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (k, t) in map.iter_mut() {
                let name = format!("{prefix}{kind}.{k}");
                let src = ckpt
                    .tensors
                    .get(&name)
                    .ok_or_else(|| Error::Integrity(format!("missing optimizer tensor {name}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Integrity(format!("optimizer tensor {name} has the wrong shape")));
                }
                *t = src.clone();
            }
        }
        self.step = ckpt
            .meta
            .get(&format!("{prefix}step"))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Integrity(format!("missing {prefix}step")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full([2], v));
        s
    }

    fn grads(v: f32) -> BTreeMap<String, Tensor<f32>> {
        [("w".to_string(), Tensor::full([2], v))].into_iter().collect()
    }

    #[test]
    fn lr_endpoints() {
        let f = |s| lr_schedule(s, 100, 1e-3, 1e-6, 10, 1.5).unwrap();
        assert_eq!(f(0), 0.0);
        assert_eq!(f(10), 1e-3);
        assert!((f(100) - 1e-6).abs() < 1e-15);
        assert!(matches!(lr_schedule(0, 10, 1.0, 0.0, 10, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn momentum_endpoints() {
        assert!((momentum_schedule(0, 100, 0.994) - 0.994).abs() < 1e-15);
        assert!((momentum_schedule(50, 100, 0.994) - 0.997).abs() < 1e-12);
        assert_eq!(momentum_schedule(100, 100, 0.994), 1.0);
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut p = store(0.7);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &grads(0.0), 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.7; 2]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(1.0);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &grads(1.0), 0.1).unwrap();
        // m_hat = 1, v_hat = 1: step = -0.1 / (1 + 1e-8).
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn decay_only_scales() {
        let mut p = store(2.0);
        let mut opt = AdamW::new(&p, 0.05);
        opt.step(&mut p, &grads(0.0), 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[2.0 * (1.0 - 0.1 * 0.05) as f32; 2]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = store(1.0);
        let mut opt = AdamW::new(&p, 0.0);
        let err = opt.step(&mut p, &grads(f32::NAN), 0.1).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains('w')));
    }
}
