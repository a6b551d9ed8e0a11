use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::dataio::{name_matches, Checkpoint};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    /// `N(0, 0.02^2)`, used for learned tokens.
    Token,
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Specs of a linear layer `name.w: [din, dout]`, `name.b: [dout]`.
/// Biases start at zero: uniform biases swamp the small center-relative
/// patch coordinates and leave the CLS output nearly input-independent.
pub(crate) fn linear_specs(out: &mut Vec<ParamSpec>, name: &str, din: usize, dout: usize) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![din, dout],
        init: Init::Uniform { fan_in: din },
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![dout],
        init: Init::Zeros,
    });
}

pub(crate) fn norm_specs(out: &mut Vec<ParamSpec>, name: &str, dim: usize) {
    out.push(ParamSpec {
        name: format!("{name}.g"),
        shape: vec![dim],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![dim],
        init: Init::Zeros,
    });
}

/// Named tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let token = Normal::new(0.0f64, 0.02).expect("valid sigma");
        let mut store = Self::new();
        for spec in specs {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
                }
                Init::Token => (0..n).map(|_| T::of(token.sample(rng))).collect(),
                Init::Ones => vec![T::one(); n],
                Init::Zeros => vec![T::zero(); n],
            };
            store.insert(&spec.name, Tensor::new(spec.shape.clone(), data).expect("spec shape"));
        }
        store
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count of tensors matching `pattern` (see
    /// [`name_matches`]).
    pub fn count(&self, pattern: &str) -> usize {
        self.iter()
            .filter(|(n, _)| name_matches(pattern, n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copy every tensor into `g` as a leaf and return the name bindings.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

impl ParamStore<f32> {
    /// SHA-256 over names, shapes and bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Add every tensor to `ckpt` under `prefix`.
    pub fn export(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (name, t) in &self.tensors {
            ckpt.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Overwrite this store's tensors from `ckpt` entries named
    /// `prefix + name`. Every name must be present with a matching shape;
    /// offenders are listed in the error.
    pub fn import(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        for (name, t) in &self.tensors {
            match ckpt.tensors.get(&format!("{prefix}{name}")) {
                None => missing.push(format!("{prefix}{name}")),
                Some(src) if src.shape() != t.shape() => mismatched.push(format!(
                    "{prefix}{name} (expected {:?}, found {:?})",
                    t.shape(),
                    src.shape()
                )),
                Some(_) => {}
            }
        }
        if !missing.is_empty() || !mismatched.is_empty() {
            let mut msg = String::new();
            if !missing.is_empty() {
                msg.push_str(&format!("missing tensors: {}", missing.join(", ")));
            }
            if !mismatched.is_empty() {
                if !msg.is_empty() {
                    msg.push_str("; ");
                }
                msg.push_str(&format!("shape mismatch: {}", mismatched.join(", ")));
            }
            return Err(Error::Integrity(msg));
        }
        for (name, t) in self.tensors.iter_mut() {
            *t = ckpt.tensors[&format!("{prefix}{name}")].clone();
        }
        Ok(())
    }
}

/// Parameter names bound to graph leaves.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Union of two bindings; names must not collide.
    pub fn merged(mut self, other: Bound) -> Result<Bound> {
        for (k, v) in other.vars {
            if self.vars.insert(k.clone(), v).is_some() {
                return Err(Error::contract(format!("parameter {k} bound twice")));
            }
        }
        Ok(self)
    }
}
