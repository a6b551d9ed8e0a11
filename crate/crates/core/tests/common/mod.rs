#![allow(dead_code)]

use pcam::model::{
    aggregate_features, embed_patches, encode, encoder_specs, generate_masks, mask_gen_specs, project, prepend_cls,
    projector_specs, Bound, Head, Mode, ModelConfig, ParamStore,
};
use pcam::numerics::{Graph, Tensor, Var};
use pcam::objective::{
    apply_mask, cls_loss, diversity_loss, mpm_loss, sparsity_loss, student_log_probs,
};
use pcam::trainer::{stream_rng, TrainConfig};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Coordinates sampled per tensor.
pub const FD_COORDS: usize = 12;
/// Gradient norms below this count as zero.
pub const FD_FLOOR: f64 = 1e-6;

pub type Build = dyn Fn(&mut Graph<f64>, &Bound) -> pcam::Result<Var>;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub coords: usize,
}

pub fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

pub fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.5..2.0))
}

pub fn unit(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.05..0.95))
}

pub fn probs(rows: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = positive(&[rows, k], rng);
    for r in t.data_mut().chunks_mut(k) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    t
}

pub fn store(inputs: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in inputs {
        s.insert(n, t);
    }
    s
}

fn v(p: &Bound, name: &str) -> Var {
    p.var(name).unwrap()
}

fn weighted_value(store: &ParamStore<f64>, build: &Build, weights: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let out = build(&mut g, &b).expect("forward");
    g.value(out).data().iter().zip(weights.data()).map(|(a, w)| a * w).sum()
}

/// Compare reverse-mode gradients of `sum(build(inputs) * W)`, `W` a fixed
/// random tensor, against central differences on sampled coordinates of
/// every input. The error of each tensor is `|a - n| / max(|a|, |n|)` over
/// its sampled coordinates; the worst tensor is returned.
pub fn check(name: &str, inputs: &ParamStore<f64>, seed: u64, build: &Build) -> GradCheck {
    let mut rng = stream_rng(seed, "gradcheck", 0, 0);
    let mut g = Graph::new();
    let b = inputs.bind(&mut g, true);
    let out = build(&mut g, &b).expect("forward");
    let weights = normal(g.shape(out), &mut rng);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).expect("weights");
    let loss = g.sum(prod);
    let grads = g.backward(loss).expect("backward");

    let mut work = inputs.clone();
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (tname, var) in b.iter() {
        let analytic = grads.get(var);
        let n = analytic.numel();
        let picks: Vec<usize> = if n <= FD_COORDS {
            (0..n).collect()
        } else {
            sample(&mut rng, n, FD_COORDS).into_vec()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &j in &picks {
            let x0 = work.get(tname).unwrap().data()[j];
            work.get_mut(tname).unwrap().data_mut()[j] = x0 + FD_STEP;
            let up = weighted_value(&work, build, &weights);
            work.get_mut(tname).unwrap().data_mut()[j] = x0 - FD_STEP;
            let down = weighted_value(&work, build, &weights);
            work.get_mut(tname).unwrap().data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        coords += picks.len();
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(FD_FLOOR);
        worst = worst.max(rel);
    }
    GradCheck {
        name: name.to_string(),
        rel_err: worst,
        coords,
    }
}

pub fn grad_config() -> TrainConfig {
    TrainConfig::parse(
        "points = 64\noversample = 64\npatches_global = [5, 4]\npatches_local = [3, 4]\nembed_dim = 8\n\
         depth = 2\nheads = 2\nmask_depth = 1\nmask_heads = 2\nembed_hidden = 6\npos_hidden = 6\n\
         proj_hidden = 10\nproj_bottleneck = 6\nprototypes = 7\nn_masks = 3\n",
    )
    .unwrap()
}

/// Parameters of `specs` in f64 with every entry jittered, so that zero
/// biases and unit gains do not hide terms.
fn jittered(specs: &[pcam::model::ParamSpec], rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut s = ParamStore::<f64>::init(specs, rng);
    for (_, t) in s.iter_mut() {
        for v in t.data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += 0.1 * n;
        }
    }
    s
}

/// Every elementwise, shape, reduction, normalization and loss operation
/// plus the four networks, `instances` random draws each.
pub fn gradient_suite(instances: usize) -> Vec<GradCheck> {
    let mut out = Vec::new();
    for i in 0..instances as u64 {
        let mut rng = stream_rng(i, "gradsuite", 0, 0);
        let r = &mut rng;
        let (a, b, c) = (r.gen_range(2..5), r.gen_range(2..5), r.gen_range(2..5));
        let mut run = |name: &str, inputs: ParamStore<f64>, build: Box<Build>| {
            out.push(check(name, &inputs, i, &*build));
        };

        run(
            "add",
            store(vec![("x", normal(&[a, b, c], r)), ("y", normal(&[b, 1], r))]),
            Box::new(move |g, p| {
                let (u, v) = (v(p, "x"), v(p, "y"));
                g.add(u, v)
            }),
        );
        run(
            "sub",
            store(vec![("x", normal(&[a, 1, c], r)), ("y", normal(&[b, c], r))]),
            Box::new(move |g, p| {
                let (u, v) = (v(p, "x"), v(p, "y"));
                g.sub(u, v)
            }),
        );
        run(
            "mul",
            store(vec![("x", normal(&[a, b], r)), ("y", normal(&[a, b], r))]),
            Box::new(move |g, p| {
                let (u, v) = (v(p, "x"), v(p, "y"));
                g.mul(u, v)
            }),
        );
        run(
            "div",
            store(vec![("x", normal(&[a, b], r)), ("y", positive(&[1, b], r))]),
            Box::new(move |g, p| {
                let (u, v) = (v(p, "x"), v(p, "y"));
                g.div(u, v)
            }),
        );
        let s = r.gen_range(-2.0..2.0);
        run(
            "scale_shift_neg",
            store(vec![("x", normal(&[a, b], r))]),
            Box::new(move |g, p| {
                let u = v(p, "x");
                let u = g.scale(u, s);
                let u = g.add_scalar(u, 0.3);
                let v = g.mul(u, u)?;
                Ok(g.neg(v))
            }),
        );
        type Unary = fn(&mut Graph<f64>, Var) -> Var;
        let unary: [(&str, Unary, bool); 10] = [
            ("exp", |g, v| g.exp(v), false),
            ("log", |g, v| g.log(v), true),
            ("sin", |g, v| g.sin(v), false),
            ("sqrt", |g, v| g.sqrt(v), true),
            ("recip", |g, v| g.recip(v), true),
            ("sigmoid", |g, v| g.sigmoid(v), false),
            ("tanh", |g, v| g.tanh(v), false),
            ("gelu", |g, v| g.gelu(v), false),
            ("swish", |g, v| g.swish(v), false),
            ("clamp", |g, v| g.clamp(v, -0.5, 0.5), false),
        ];
        for (name, f, pos) in unary {
            let t = if pos { positive(&[a, b], r) } else { normal(&[a, b], r) };
            run(name, store(vec![("x", t)]), Box::new(move |g, p| Ok(f(g, v(p, "x")))));
        }
        run(
            "matmul",
            store(vec![("x", normal(&[a, b], r)), ("y", normal(&[b, c], r))]),
            Box::new(move |g, p| {
                let (u, v) = (v(p, "x"), v(p, "y"));
                g.matmul(u, v)
            }),
        );
        run(
            "matmul_batched",
            store(vec![("x", normal(&[2, a, b], r)), ("y", normal(&[2, b, c], r))]),
            Box::new(move |g, p| {
                let (u, v) = (v(p, "x"), v(p, "y"));
                g.matmul(u, v)
            }),
        );
        run(
            "matmul_shared_rhs",
            store(vec![("x", normal(&[2, a, b], r)), ("y", normal(&[b, c], r))]),
            Box::new(move |g, p| {
                let (u, v) = (v(p, "x"), v(p, "y"));
                g.matmul(u, v)
            }),
        );
        run(
            "transpose",
            store(vec![("x", normal(&[2, a, b], r))]),
            Box::new(move |g, p| g.transpose(v(p, "x"))),
        );
        run(
            "permute",
            store(vec![("x", normal(&[a, 2, b, c], r))]),
            Box::new(move |g, p| g.permute(v(p, "x"), &[2, 0, 3, 1])),
        );
        run(
            "reshape",
            store(vec![("x", normal(&[a, b, c], r))]),
            Box::new(move |g, p| {
                let u = g.reshape(v(p, "x"), &[b, a * c])?;
                let v = g.sin(u);
                g.mul(u, v)
            }),
        );
        run(
            "expand",
            store(vec![("x", normal(&[1, b, 1], r))]),
            Box::new(move |g, p| g.expand(v(p, "x"), &[a, b, c])),
        );
        run(
            "concat",
            store(vec![
                ("x", normal(&[a, 1, c], r)),
                ("y", normal(&[a, b, c], r)),
                ("z", normal(&[a, 2, c], r)),
            ]),
            Box::new(move |g, p| {
                let parts = [v(p, "x"), v(p, "y"), v(p, "z")];
                g.concat(&parts, 1)
            }),
        );
        run(
            "narrow",
            store(vec![("x", normal(&[a, b + 2, c], r))]),
            Box::new(move |g, p| g.narrow(v(p, "x"), 1, 1, b)),
        );
        run(
            "sum_axis",
            store(vec![("x", normal(&[a, b, c], r))]),
            Box::new(move |g, p| g.sum_axis(v(p, "x"), 1)),
        );
        run(
            "mean_axis",
            store(vec![("x", normal(&[a, b, c], r))]),
            Box::new(move |g, p| g.mean_axis(v(p, "x"), 2)),
        );
        run(
            "max_axis",
            store(vec![("x", normal(&[a, b, c], r))]),
            Box::new(move |g, p| g.max_axis(v(p, "x"), 1)),
        );
        run(
            "sum_mean",
            store(vec![("x", normal(&[a, b], r))]),
            Box::new(move |g, p| {
                let u = v(p, "x");
                let sq = g.mul(u, u)?;
                let s = g.sum(sq);
                let m = g.mean(u);
                g.mul(s, m)
            }),
        );
        run(
            "softmax",
            store(vec![("x", normal(&[a, b, c], r))]),
            Box::new(move |g, p| g.softmax(v(p, "x"), 1)),
        );
        run(
            "layer_norm",
            store(vec![
                ("x", normal(&[a, b, c + 1], r)),
                ("g", normal(&[c + 1], r)),
                ("b", normal(&[c + 1], r)),
            ]),
            Box::new(move |g, p| {
                let (u, gain, bias) = (v(p, "x"), v(p, "g"), v(p, "b"));
                g.layer_norm(u, gain, bias)
            }),
        );
        run(
            "l2_normalize",
            store(vec![("x", normal(&[a, b, c], r))]),
            Box::new(move |g, p| pcam::model::l2_normalize(g, v(p, "x"))),
        );
        let k = c + 2;
        let teacher = probs(a * b, k, r).reshape([a, b, k]).unwrap();
        run(
            "mpm_loss",
            store(vec![("x", normal(&[a, b, k], r))]),
            Box::new(move |g, p| {
                let lq = student_log_probs(g, v(p, "x"), 0.1)?;
                let t = g.constant(teacher.clone());
                mpm_loss(g, lq, t, None)
            }),
        );
        let weights = Tensor::from_fn([a, b], |j| (j % 3) as f64);
        let teacher = probs(a * b, k, r).reshape([a, b, k]).unwrap();
        run(
            "mpm_loss_weighted",
            store(vec![("x", normal(&[a, b, k], r))]),
            Box::new(move |g, p| {
                let lq = student_log_probs(g, v(p, "x"), 0.1)?;
                let t = g.constant(teacher.clone());
                mpm_loss(g, lq, t, Some(&weights))
            }),
        );
        let teacher = probs(a * 2, k, r).reshape([a, 2, k]).unwrap();
        run(
            "cls_loss",
            store(vec![("l", normal(&[a, b, k], r)), ("gl", normal(&[a, 2, 3, k], r))]),
            Box::new(move |g, p| {
                let l = student_log_probs(g, v(p, "l"), 0.1)?;
                let gl = student_log_probs(g, v(p, "gl"), 0.1)?;
                let t = g.constant(teacher.clone());
                cls_loss(g, t, Some(l), gl)
            }),
        );
        run(
            "sparsity_loss",
            store(vec![("m", normal(&[a, 3, b + 3], r))]),
            Box::new(move |g, p| {
                let m = g.softmax(v(p, "m"), 1)?;
                sparsity_loss(g, m)
            }),
        );
        run(
            "diversity_loss",
            store(vec![("m", normal(&[a, 3, b + 3], r))]),
            Box::new(move |g, p| {
                let m = g.softmax(v(p, "m"), 1)?;
                diversity_loss(g, m)
            }),
        );
        run(
            "apply_mask",
            store(vec![
                ("x", normal(&[a, b, c], r)),
                ("m", unit(&[a, 3, b], r)),
                ("t", normal(&[c], r)),
            ]),
            Box::new(move |g, p| {
                let seq = pcam::model::TokenSequence {
                    x: v(p, "x"),
                    has_cls: false,
                    patches: b,
                    dim: c,
                };
                Ok(apply_mask(g, seq, v(p, "m"), v(p, "t"))?.x)
            }),
        );

        let model = grad_config().model();
        out.extend(network_checks(&model, i));
    }
    out
}

fn network_checks(model: &ModelConfig, seed: u64) -> Vec<GradCheck> {
    let mut rng = stream_rng(seed, "gradnets", 0, 0);
    let (s, np, k, d) = (2, 5, 4, model.encoder.embed_dim);
    let mut out = Vec::new();

    let mut emb = jittered(&encoder_specs(model), &mut rng);
    emb.insert("input.groups", normal(&[s, np, k, 3], &mut rng));
    emb.insert("input.centers", normal(&[s, np, 3], &mut rng));
    let embedder_only: ParamStore<f64> = {
        let mut e = ParamStore::new();
        for (n, t) in emb.iter() {
            if n.starts_with("encoder.embed") || n.starts_with("encoder.pos") || n.starts_with("input.") {
                e.insert(n, t.clone());
            }
        }
        e
    };
    out.push(check("embedder", &embedder_only, seed, &|g, p| {
        let seq = embed_patches(g, p, p.var("input.groups")?, p.var("input.centers")?)?;
        Ok(seq.x)
    }));

    let enc_cfg = model.encoder.clone();
    out.push(check("encoder", &emb, seed, &move |g, p| {
        let seq = embed_patches(g, p, p.var("input.groups")?, p.var("input.centers")?)?;
        let seq = prepend_cls(g, p, seq)?;
        let enc = encode(g, p, &enc_cfg, seq, &mut Mode::Eval)?;
        aggregate_features(g, enc.seq)
    }));

    let mut proj = jittered(&projector_specs(d, &model.projector), &mut rng);
    proj.insert("input.x", normal(&[s, np, d], &mut rng));
    out.push(check("projector", &proj, seed, &|g, p| {
        let x = p.var("input.x")?;
        let c = project(g, p, Head::Cls, x)?;
        let t = project(g, p, Head::Patch, x)?;
        g.concat(&[c, t], 2)
    }));

    let mut mg = jittered(&mask_gen_specs(&model.mask_gen), &mut rng);
    mg.insert("input.x", normal(&[s, np, d], &mut rng));
    let mg_cfg = model.mask_gen.clone();
    out.push(check("mask_generator", &mg, seed, &move |g, p| {
        let seq = pcam::model::TokenSequence {
            x: p.var("input.x")?,
            has_cls: false,
            patches: np,
            dim: d,
        };
        Ok(generate_masks(g, p, &mg_cfg, seq, &mut Mode::Eval)?.m)
    }));
    out
}
