//! Forward definitions of every network, recorded on a [`Graph`].
//!
//! Parameters are looked up by name in a [`Bound`]; the `*_specs` functions
//! declare the same names with their shapes.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::geometry::PatchSet;
use crate::numerics::{Graph, Real, Tensor, Var};

use super::config::{EncoderConfig, FfnKind, MaskGenConfig, ModelConfig, ProjectorConfig};
use super::params::{linear_specs, norm_specs, Bound, Init, ParamSpec};

/// Whether stochastic depth is active.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Tokens of a batch of sequences, `[batch, tokens, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub x: Var,
    pub has_cls: bool,
    pub patches: usize,
    pub dim: usize,
}

// ---- parameter declarations ----

fn block_specs(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &EncoderConfig) {
    let d = cfg.embed_dim;
    let h = cfg.ffn_hidden();
    for i in 0..cfg.depth {
        let b = format!("{prefix}.blocks.{i}");
        norm_specs(out, &format!("{b}.norm1"), d);
        linear_specs(out, &format!("{b}.attn.qkv"), d, 3 * d);
        linear_specs(out, &format!("{b}.attn.proj"), d, d);
        norm_specs(out, &format!("{b}.norm2"), d);
        match cfg.ffn_kind {
            FfnKind::Swiglu => {
                linear_specs(out, &format!("{b}.ffn.gate_value"), d, 2 * h);
                linear_specs(out, &format!("{b}.ffn.out"), h, d);
            }
            FfnKind::Gelu => {
                linear_specs(out, &format!("{b}.ffn.fc1"), d, h);
                linear_specs(out, &format!("{b}.ffn.out"), h, d);
            }
        }
    }
    norm_specs(out, &format!("{prefix}.norm"), d);
}

/// Embedder, position MLP, CLS token and transformer (`encoder.*`).
pub fn encoder_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.encoder.embed_dim;
    let mut out = Vec::new();
    linear_specs(&mut out, "encoder.embed.fc1", 3, cfg.embed_hidden);
    linear_specs(&mut out, "encoder.embed.fc2", cfg.embed_hidden, d);
    linear_specs(&mut out, "encoder.pos.fc1", 3, cfg.pos_hidden);
    linear_specs(&mut out, "encoder.pos.fc2", cfg.pos_hidden, d);
    out.push(ParamSpec {
        name: "encoder.cls_token".into(),
        shape: vec![d],
        init: Init::Token,
    });
    block_specs(&mut out, "encoder", &cfg.encoder);
    out
}

/// Shared trunk plus the two heads (`projector.*`).
pub fn projector_specs(d: usize, cfg: &ProjectorConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    linear_specs(&mut out, "projector.fc1", d, cfg.hidden);
    linear_specs(&mut out, "projector.fc2", cfg.hidden, cfg.hidden);
    linear_specs(&mut out, "projector.fc3", cfg.hidden, cfg.bottleneck);
    linear_specs(&mut out, "projector.cls_head", cfg.bottleneck, cfg.prototypes);
    linear_specs(&mut out, "projector.patch_head", cfg.bottleneck, cfg.prototypes);
    out
}

pub fn mask_token_spec(d: usize) -> ParamSpec {
    ParamSpec {
        name: "mask_token".into(),
        shape: vec![d],
        init: Init::Token,
    }
}

/// Everything the student trains: encoder, projector and mask token.
pub fn student_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = encoder_specs(cfg);
    out.extend(projector_specs(cfg.encoder.embed_dim, &cfg.projector));
    out.push(mask_token_spec(cfg.encoder.embed_dim));
    out
}

/// Mask generator transformer and head (`mask_gen.*`).
pub fn mask_gen_specs(cfg: &MaskGenConfig) -> Vec<ParamSpec> {
    let d = cfg.encoder.embed_dim;
    let mut out = Vec::new();
    block_specs(&mut out, "mask_gen", &cfg.encoder);
    linear_specs(&mut out, "mask_gen.head.fc1", d, d);
    linear_specs(&mut out, "mask_gen.head.fc2", d, cfg.n_masks);
    out
}

pub fn count(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

// ---- layers ----

pub fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn norm<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{name}.g"))?;
    let bias = p.var(&format!("{name}.b"))?;
    g.layer_norm(x, gain, bias)
}

/// Rows scaled to unit Euclidean norm along the last axis.
pub fn l2_normalize<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let last = shape.len() - 1;
    let sq = g.mul(x, x)?;
    let s = g.sum_axis(sq, last)?;
    let mut keep = shape.clone();
    keep[last] = 1;
    let s = g.reshape(s, &keep)?;
    let s = g.clamp(s, T::of(1e-24), T::infinity());
    let n = g.sqrt(s);
    g.div(x, n)
}

/// Groups and centers of same-sized patch sets as `[s, p, k, 3]` and
/// `[s, p, 3]` tensors.
pub fn patch_tensors<T: Real>(sets: &[PatchSet]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = sets.first().ok_or_else(|| Error::arg("no patch sets"))?;
    let (p, k) = (first.num_patches(), first.k);
    if sets.iter().any(|s| s.num_patches() != p || s.k != k) {
        return Err(Error::arg("patch sets in a batch must share patch and group sizes"));
    }
    let mut groups = Vec::with_capacity(sets.len() * p * k * 3);
    let mut centers = Vec::with_capacity(sets.len() * p * 3);
    for s in sets {
        groups.extend(s.groups.iter().flatten().map(|&v| T::of(v as f64)));
        centers.extend(s.centers.iter().flatten().map(|&v| T::of(v as f64)));
    }
    Ok((
        Tensor::new([sets.len(), p, k, 3], groups)?,
        Tensor::new([sets.len(), p, 3], centers)?,
    ))
}

/// PointNet patch embedding of `[s, p, k, 3]` groups, `[s, p, d]`.
pub fn patch_embedding<T: Real>(g: &mut Graph<T>, p: &Bound, groups: Var) -> Result<Var> {
    let shape = g.shape(groups).to_vec();
    let [s, np, k, _] = shape[..] else {
        return Err(Error::arg(format!("groups must be [s, p, k, 3], got {shape:?}")));
    };
    let h = linear(g, p, "encoder.embed.fc1", groups)?;
    let h = g.gelu(h);
    let h = linear(g, p, "encoder.embed.fc2", h)?;
    let h = g.gelu(h);
    let d = g.shape(h)[3];
    let h = g.reshape(h, &[s * np, k, d])?;
    let m = g.max_axis(h, 1)?;
    g.reshape(m, &[s, np, d])
}

/// Position embedding of `[s, p, 3]` centers.
pub fn position_embedding<T: Real>(g: &mut Graph<T>, p: &Bound, centers: Var) -> Result<Var> {
    let h = linear(g, p, "encoder.pos.fc1", centers)?;
    let h = g.gelu(h);
    linear(g, p, "encoder.pos.fc2", h)
}

/// Patch plus position embedding, without CLS.
pub fn embed_patches<T: Real>(g: &mut Graph<T>, p: &Bound, groups: Var, centers: Var) -> Result<TokenSequence> {
    let e = patch_embedding(g, p, groups)?;
    let pos = position_embedding(g, p, centers)?;
    let x = g.add(e, pos)?;
    let shape = g.shape(x);
    Ok(TokenSequence {
        x,
        has_cls: false,
        patches: shape[1],
        dim: shape[2],
    })
}

pub fn prepend_cls<T: Real>(g: &mut Graph<T>, p: &Bound, seq: TokenSequence) -> Result<TokenSequence> {
    if seq.has_cls {
        return Err(Error::contract("sequence already has a CLS token"));
    }
    let s = g.shape(seq.x)[0];
    let cls = p.var("encoder.cls_token")?;
    let cls = g.reshape(cls, &[1, 1, seq.dim])?;
    let cls = g.expand(cls, &[s, 1, seq.dim])?;
    let x = g.concat(&[cls, seq.x], 1)?;
    Ok(TokenSequence { x, has_cls: true, ..seq })
}

fn drop_path<T: Real>(g: &mut Graph<T>, branch: Var, rate: f64, mode: &mut Mode) -> Result<Var> {
    let Mode::Train(rng) = mode else {
        return Ok(branch);
    };
    if rate <= 0.0 {
        return Ok(branch);
    }
    let s = g.shape(branch)[0];
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..s)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mask = g.constant(Tensor::new([s, 1, 1], mask)?);
    g.mul(branch, mask)
}

fn attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    cfg: &EncoderConfig,
    x: Var,
    attn_out: &mut Vec<Var>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (s, t, d) = (shape[0], shape[1], shape[2]);
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let qkv = linear(g, p, &format!("{name}.qkv"), x)?;
    let qkv = g.reshape(qkv, &[s, t, 3, h, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3, s * h, t, dh])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let v = g.narrow(qkv, 0, i, 1)?;
        *part = g.reshape(v, &[s * h, t, dh])?;
    }
    let [q, k, v] = parts;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
    let a = g.softmax(scores, 2)?;
    attn_out.push(a);
    let o = g.matmul(a, v)?;
    let o = g.reshape(o, &[s, h, t, dh])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[s, t, d])?;
    linear(g, p, &format!("{name}.proj"), o)
}

fn feed_forward<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let hidden = match cfg.ffn_kind {
        FfnKind::Swiglu => {
            let h = cfg.ffn_hidden();
            let gv = linear(g, p, &format!("{name}.gate_value"), x)?;
            let last = g.shape(gv).len() - 1;
            let gate = g.narrow(gv, last, 0, h)?;
            let value = g.narrow(gv, last, h, h)?;
            let gate = g.swish(gate);
            g.mul(gate, value)?
        }
        FfnKind::Gelu => {
            let h = linear(g, p, &format!("{name}.fc1"), x)?;
            g.gelu(h)
        }
    };
    linear(g, p, &format!("{name}.out"), hidden)
}

/// Pre-norm transformer blocks plus the final norm. Attention weights of
/// every block are appended to `attn_out` as `[s * heads, t, t]`.
pub fn transformer<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    cfg: &EncoderConfig,
    mut x: Var,
    mode: &mut Mode,
    attn_out: &mut Vec<Var>,
) -> Result<Var> {
    cfg.validate()?;
    if g.shape(x).len() != 3 || g.shape(x)[2] != cfg.embed_dim {
        return Err(Error::config(format!(
            "tokens {:?} do not match width {}",
            g.shape(x),
            cfg.embed_dim
        )));
    }
    for i in 0..cfg.depth {
        let b = format!("{prefix}.blocks.{i}");
        let h = norm(g, p, &format!("{b}.norm1"), x)?;
        let h = attention(g, p, &format!("{b}.attn"), cfg, h, attn_out)?;
        let h = drop_path(g, h, cfg.stochastic_depth_rate, mode)?;
        x = g.add(x, h)?;
        let h = norm(g, p, &format!("{b}.norm2"), x)?;
        let h = feed_forward(g, p, &format!("{b}.ffn"), cfg, h)?;
        let h = drop_path(g, h, cfg.stochastic_depth_rate, mode)?;
        x = g.add(x, h)?;
    }
    norm(g, p, &format!("{prefix}.norm"), x)
}

pub struct Encoded {
    pub seq: TokenSequence,
    pub attention: Vec<Var>,
}

/// Contextualize a sequence that already carries its CLS token.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &EncoderConfig,
    seq: TokenSequence,
    mode: &mut Mode,
) -> Result<Encoded> {
    if !seq.has_cls {
        return Err(Error::contract("encoder input must start with a CLS token"));
    }
    let mut attention = Vec::new();
    let x = transformer(g, p, "encoder", cfg, seq.x, mode, &mut attention)?;
    Ok(Encoded {
        seq: TokenSequence { x, ..seq },
        attention,
    })
}

/// `[s, 2d]`: CLS features next to max-pooled plus mean-pooled patches.
pub fn aggregate_features<T: Real>(g: &mut Graph<T>, encoded: TokenSequence) -> Result<Var> {
    if !encoded.has_cls || encoded.patches == 0 {
        return Err(Error::contract("aggregation needs a CLS token and at least one patch"));
    }
    let s = g.shape(encoded.x)[0];
    let cls = g.narrow(encoded.x, 1, 0, 1)?;
    let cls = g.reshape(cls, &[s, encoded.dim])?;
    let patches = g.narrow(encoded.x, 1, 1, encoded.patches)?;
    let mx = g.max_axis(patches, 1)?;
    let avg = g.mean_axis(patches, 1)?;
    let pooled = g.add(mx, avg)?;
    g.concat(&[cls, pooled], 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Cls,
    Patch,
}

/// Shared projector trunk, ending in the L2-normalized bottleneck.
pub fn projector_trunk<T: Real>(g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
    let h = linear(g, p, "projector.fc1", x)?;
    let h = g.gelu(h);
    let h = linear(g, p, "projector.fc2", h)?;
    let h = g.gelu(h);
    let h = linear(g, p, "projector.fc3", h)?;
    l2_normalize(g, h)
}

/// Prototype logits of already-normalized bottleneck rows.
pub fn projector_head<T: Real>(g: &mut Graph<T>, p: &Bound, which: Head, z: Var) -> Result<Var> {
    let name = match which {
        Head::Cls => "projector.cls_head",
        Head::Patch => "projector.patch_head",
    };
    linear(g, p, name, z)
}

pub fn project<T: Real>(g: &mut Graph<T>, p: &Bound, which: Head, x: Var) -> Result<Var> {
    let z = projector_trunk(g, p, x)?;
    projector_head(g, p, which, z)
}

pub struct Masks {
    /// `[s, n, p]`, softmax over the `n` axis.
    pub m: Var,
    pub attention: Vec<Var>,
}

/// Soft masks for a batch of CLS-free sequences.
pub fn generate_masks<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &MaskGenConfig,
    seq: TokenSequence,
    mode: &mut Mode,
) -> Result<Masks> {
    if cfg.n_masks < 2 {
        return Err(Error::arg(format!("need at least 2 masks, got {}", cfg.n_masks)));
    }
    if seq.has_cls {
        return Err(Error::contract("the mask generator takes sequences without CLS"));
    }
    let mut attention = Vec::new();
    let x = transformer(g, p, "mask_gen", &cfg.encoder, seq.x, mode, &mut attention)?;
    let h = linear(g, p, "mask_gen.head.fc1", x)?;
    let h = g.gelu(h);
    let logits = linear(g, p, "mask_gen.head.fc2", h)?;
    let logits = g.transpose(logits)?;
    let m = g.softmax(logits, 1)?;
    Ok(Masks { m, attention })
}
