//! One PASS/FAIL line per acceptance criterion, written straight to stdout
//! so it shows without `--nocapture`.

mod common;

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use pcam::cli::{gen_data, main_with_args, pretrain, probe, GenDataArgs, PretrainArgs, ProbeArgs};
use pcam::dataio::{gen_synthetic, ShapeClass};
use pcam::eval::ProbeResult;
use pcam::geometry::{fps_from, patchify, Point, PointCloud};
use pcam::model::{
    generate_masks, mask_gen_specs, parameter_counts, prepend_cls, Mode, ParamStore,
    TokenSequence,
};
use pcam::numerics::{Graph, Tensor};
use pcam::objective::{apply_mask, diversity_loss, ema_update, sparsity_loss};
use pcam::trainer::{
    lr_schedule, momentum_schedule, read_metrics, stream_rng, Masking, StepControl, TrainConfig, Trainer, DESK_CFG,
};
use rand::Rng;

fn report(name: &str, pass: bool, detail: &str) {
    let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{name}: {detail}");
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn desk_with_seed(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("desk_seed{seed}.cfg"));
    std::fs::write(&path, format!("{DESK_CFG}\nseed = {seed}\n")).unwrap();
    path
}

fn small_data(n_per_class: usize, seed: u64) -> Vec<PointCloud> {
    let classes = [ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Torus, ShapeClass::Plane];
    let mut out = Vec::new();
    for (label, &c) in classes.iter().enumerate() {
        for i in 0..n_per_class {
            let mut rng = stream_rng(seed, "data", label as u64, i as u64);
            out.push(gen_synthetic(c, 512, 0.4, &mut rng).unwrap().with_label(label));
        }
    }
    out
}

#[test]
fn gradient_suite() {
    let t0 = Instant::now();
    let checks = common::gradient_suite(3);
    let secs = t0.elapsed().as_secs_f64();
    let worst = checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
    let networks = ["embedder", "encoder", "projector", "mask_generator"];
    let all_nets = networks.iter().all(|n| checks.iter().any(|c| c.name == *n));
    let pass = checks.len() >= 100 && worst.rel_err < 1e-5 && all_nets && secs < 300.0;
    report(
        "gradient_suite",
        pass,
        &format!(
            "{} instances, worst relative error {:.2e} ({}), {:.1}s",
            checks.len(),
            worst.rel_err,
            worst.name,
            secs
        ),
    );
}

/// `(1/N) sum_i 1 / sin(pi/p sum_j m_ij)`, evaluated directly.
fn sparsity_oracle(m: &[f64], n: usize, p: usize) -> f64 {
    (0..n)
        .map(|i| {
            let s: f64 = m[i * p..(i + 1) * p].iter().sum();
            1.0 / (PI * s / p as f64).sin()
        })
        .sum::<f64>()
        / n as f64
}

/// `(1/N^2) sum_i sum_k (1 - cos(m_i, m_k))`, evaluated directly.
fn diversity_oracle(m: &[f64], n: usize, p: usize) -> f64 {
    let row = |i: usize| &m[i * p..(i + 1) * p];
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..n {
            let dot: f64 = row(i).iter().zip(row(k)).map(|(a, b)| a * b).sum();
            let ni: f64 = row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
            let nk: f64 = row(k).iter().map(|a| a * a).sum::<f64>().sqrt();
            total += 1.0 - dot / (ni * nk);
        }
    }
    total / (n * n) as f64
}

fn graph_losses(m: &[f64], n: usize, p: usize) -> (f64, f64) {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::new([1, n, p], m.to_vec()).unwrap());
    let s = sparsity_loss(&mut g, v).unwrap();
    let d = diversity_loss(&mut g, v).unwrap();
    (g.value(s).item(), g.value(d).item())
}

#[test]
fn mask_algebra() {
    let cfg = TrainConfig::desk().model().mask_gen;
    let (s, p, d) = (2, 16, cfg.encoder.embed_dim);
    let mut worst_col = 0.0f64;
    for i in 0..1000u64 {
        let params = ParamStore::<f32>::init(&mask_gen_specs(&cfg), &mut stream_rng(i, "maskalg", 0, 0));
        let mut rng = stream_rng(i, "maskalg", 1, 0);
        let x = Tensor::from_fn([s, p, d], |_| rng.gen_range(-2.0f32..2.0));
        let mut g = Graph::<f32>::new();
        let b = params.bind(&mut g, false);
        let seq = TokenSequence {
            x: g.constant(x),
            has_cls: false,
            patches: p,
            dim: d,
        };
        let m = generate_masks(&mut g, &b, &cfg, seq, &mut Mode::Eval).unwrap().m;
        let m = g.value(m);
        let n = cfg.n_masks;
        for si in 0..s {
            for j in 0..p {
                let col: f64 = (0..n).map(|k| m.at(&[si, k, j]) as f64).sum();
                worst_col = worst_col.max((col - 1.0).abs());
            }
        }
    }

    let uniform = vec![1.0 / 3.0; 3 * 12];
    let (spar_uniform, _) = graph_losses(&uniform, 3, 12);
    let half: Vec<f64> = (0..2 * 10).map(|j| if (j / 10 + j % 10) % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let (spar_half, _) = graph_losses(&half, 2, 10);
    let same: Vec<f64> = [0.2, 0.5, 0.3, 0.9].repeat(3);
    let (_, div_same) = graph_losses(&same, 3, 4);
    let orth: Vec<f64> = (0..3 * 6).map(|j| if j % 6 / 2 == j / 6 { 1.0 } else { 0.0 }).collect();
    let (_, div_orth) = graph_losses(&orth, 3, 6);

    let mut rng = stream_rng(0, "maskalg", 2, 0);
    let mut worst_oracle = 0.0f64;
    for _ in 0..200 {
        let (n, p) = (rng.gen_range(2..5), rng.gen_range(3..12));
        let mut m: Vec<f64> = (0..n * p).map(|_| rng.gen_range(0.01..1.0)).collect();
        for j in 0..p {
            let col: f64 = (0..n).map(|i| m[i * p + j]).sum();
            (0..n).for_each(|i| m[i * p + j] /= col);
        }
        let (gs, gd) = graph_losses(&m, n, p);
        worst_oracle = worst_oracle
            .max((gs - sparsity_oracle(&m, n, p)).abs())
            .max((gd - diversity_oracle(&m, n, p)).abs());
    }

    let checks = [
        worst_col <= 1e-5,
        (spar_uniform - 2.0 / 3f64.sqrt()).abs() <= 1e-6,
        (spar_uniform - sparsity_oracle(&uniform, 3, 12)).abs() <= 1e-12,
        (spar_half - 1.0).abs() <= 1e-6,
        div_same.abs() <= 1e-12,
        (div_orth - 2.0 / 3.0).abs() <= 1e-6,
        worst_oracle <= 1e-12,
    ];
    report(
        "mask_algebra",
        checks.iter().all(|&c| c),
        &format!(
            "column-sum dev {worst_col:.1e} over 1000 forwards; L_spar uniform N=3 {spar_uniform:.9}, \
             half N=2 {spar_half:.9}; L_div identical {div_same:.1e}, orthogonal {div_orth:.9}; \
             oracle dev {worst_oracle:.1e}"
        ),
    );
}

#[test]
fn masking_blend() {
    let (s, n, p, d) = (2, 3, 5, 8);
    let mut rng = stream_rng(0, "blend", 0, 0);
    let x = Tensor::from_fn([s, p, d], |_| rng.gen_range(-3.0f32..3.0));
    let token = Tensor::from_fn([d], |_| rng.gen_range(-3.0f32..3.0));
    let cls = Tensor::from_fn([d], |_| rng.gen_range(-3.0f32..3.0));
    let run = |fill: f32| -> (Tensor<f32>, Tensor<f32>) {
        let mut g = Graph::<f32>::new();
        let mut params = ParamStore::<f32>::new();
        params.insert("encoder.cls_token", cls.clone());
        let b = params.bind(&mut g, false);
        let seq = TokenSequence {
            x: g.constant(x.clone()),
            has_cls: false,
            patches: p,
            dim: d,
        };
        let m = g.constant(Tensor::full([s, n, p], fill));
        let t = g.constant(token.clone());
        let masked = apply_mask(&mut g, seq, m, t).unwrap();
        let with_cls = prepend_cls(&mut g, &b, masked).unwrap();
        (g.value(masked.x).clone(), g.value(with_cls.x).clone())
    };
    let expect = |f: &dyn Fn(f32, f32) -> f32| -> Tensor<f32> {
        Tensor::from_fn([s * n, p, d], |idx| {
            let (sn, rest) = (idx / (p * d), idx % (p * d));
            let xi = x.data()[(sn / n) * p * d + rest];
            f(xi, token.data()[rest % d])
        })
    };
    let mut worst = [0.0f64; 3];
    let mut cls_dev = 0.0f64;
    for (k, (fill, oracle)) in [
        (0.0f32, expect(&|xi, _| xi)),
        (1.0, expect(&|_, t| t)),
        (0.5, expect(&|xi, t| 0.5 * (xi + t))),
    ]
    .into_iter()
    .enumerate()
    {
        let (masked, with_cls) = run(fill);
        worst[k] = masked.max_abs_diff(&oracle);
        for row in 0..s * n {
            for j in 0..d {
                cls_dev = cls_dev.max((with_cls.at(&[row, 0, j]) - cls.data()[j]).abs() as f64);
            }
        }
    }
    let mut g = Graph::<f32>::new();
    let refuses_cls = {
        let seq = TokenSequence {
            x: g.constant(Tensor::zeros([s, p + 1, d])),
            has_cls: true,
            patches: p,
            dim: d,
        };
        let m = g.constant(Tensor::zeros([s, n, p + 1]));
        let t = g.constant(token.clone());
        apply_mask(&mut g, seq, m, t).is_err()
    };
    let pass = worst.iter().all(|&w| w <= 1e-6) && cls_dev == 0.0 && refuses_cls;
    report(
        "masking_blend",
        pass,
        &format!(
            "max dev m=0 {:.1e}, m=1 {:.1e}, m=0.5 {:.1e}; CLS dev {cls_dev:.1e}; CLS-bearing input rejected: {refuses_cls}",
            worst[0], worst[1], worst[2]
        ),
    );
}

/// Greedy furthest point sampling recomputing every minimum distance from
/// scratch.
fn fps_oracle(points: &[Point], p: usize, start: usize) -> Vec<usize> {
    let mut sel = vec![start];
    while sel.len() < p {
        let mut best: Option<(f32, usize)> = None;
        for (i, q) in points.iter().enumerate() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel
                .iter()
                .map(|&s| {
                    let c = points[s];
                    let (dx, dy, dz) = (q[0] - c[0], q[1] - c[1], q[2] - c[2]);
                    dx * dx + dy * dy + dz * dz
                })
                .fold(f32::INFINITY, f32::min);
            if best.map_or(true, |(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        sel.push(best.unwrap().1);
    }
    sel
}

#[test]
fn fps_oracle_and_coverage() {
    let t0 = Instant::now();
    let mut mismatches = 0;
    for c in 0..500u64 {
        let mut rng = stream_rng(c, "fps_oracle", 0, 0);
        let n = rng.gen_range(1..=64);
        let pts: Vec<Point> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let p = rng.gen_range(1..=n);
        let start = rng.gen_range(0..n);
        if fps_from(&pts, p, start).unwrap() != fps_oracle(&pts, p, start) {
            mismatches += 1;
        }
    }
    let mut cov = 0.0;
    for c in 0..100u64 {
        let mut rng = stream_rng(c, "coverage", 0, 0);
        let cloud = gen_synthetic(ShapeClass::Sphere, 1024, 0.0, &mut rng).unwrap();
        cov += patchify(&cloud, 64, 32, &mut rng).unwrap().coverage(1024);
    }
    cov /= 100.0;
    let secs = t0.elapsed().as_secs_f64();
    report(
        "fps_oracle_and_coverage",
        mismatches == 0 && cov >= 0.95 && secs < 120.0,
        &format!("{mismatches}/500 oracle mismatches; mean kNN coverage {:.2}% (n=1024, p=64, k=32); {secs:.1}s", 100.0 * cov),
    );
}

#[test]
fn ema_and_schedules() {
    let mut rng = stream_rng(0, "ema", 0, 0);
    let mut teacher = ParamStore::<f32>::new();
    let mut student = ParamStore::<f32>::new();
    teacher.insert("w", Tensor::from_fn([64], |_| rng.gen_range(-2.0f32..2.0)));
    student.insert("w", Tensor::from_fn([64], |_| rng.gen_range(-2.0f32..2.0)));
    let (t, s) = (teacher.get("w").unwrap().clone(), student.get("w").unwrap().clone());
    let mut ema_ok = true;
    let mut ema_dev = 0.0f64;
    for lambda in [0.0, 0.5, 0.994, 1.0] {
        let mut tt = teacher.clone();
        ema_update(&mut tt, &student, lambda).unwrap();
        let got = tt.get("w").unwrap();
        for ((&g, &a), &b) in got.data().iter().zip(t.data()).zip(s.data()) {
            let exact = lambda * a as f64 + (1.0 - lambda) * b as f64;
            let dev = (g as f64 - exact).abs();
            if lambda == 0.0 || lambda == 1.0 || lambda == 0.5 {
                ema_ok &= g as f64 == exact;
            } else {
                ema_ok &= dev <= 2.0 * f32::EPSILON as f64 * exact.abs().max(1.0);
            }
            ema_dev = ema_dev.max(dev);
        }
    }

    let total = 2000;
    let mom_ok = momentum_schedule(0, total, 0.994) == 0.994 && momentum_schedule(total, total, 0.994) == 1.0;
    let (lr_max, lr_min, warm) = (5e-4, 1e-6, 100);
    let sched = |t: usize, k: f64, w: usize| lr_schedule(t, total, lr_max, lr_min, w, k).unwrap();
    let lr_ok = sched(0, 1.0, warm) == 0.0
        && (sched(warm, 1.0, warm) - lr_max).abs() <= 1e-12
        && (sched(total, 1.0, warm) - lr_min).abs() <= 1e-12
        && (sched(0, 1.0, 0) - lr_max).abs() <= 1e-12
        && (sched(total, 2.0, warm) - lr_min).abs() <= 1e-12;
    let mut cos_dev = 0.0f64;
    for w in [0, warm] {
        for t in w..=total {
            let plain = lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * (t - w) as f64 / (total - w) as f64).cos());
            cos_dev = cos_dev.max((sched(t, 1.0, w) - plain).abs());
        }
    }
    report(
        "ema_and_schedules",
        ema_ok && mom_ok && lr_ok && cos_dev <= 1e-12,
        &format!(
            "EMA exact for 0/0.5/1 and within 2 ulp at 0.994 (max dev {ema_dev:.1e}): {ema_ok}; momentum endpoints: {mom_ok}; \
             lr endpoints: {lr_ok}; k=1 vs cosine max dev {cos_dev:.1e}"
        ),
    );
}

#[test]
fn gradient_isolation() {
    let mut tr = Trainer::new(TrainConfig::desk(), small_data(8, 11)).unwrap();
    let mut leaks = Vec::new();
    let (enc0, mask0) = (tr.state.student.checksum(), tr.state.mask_gen.checksum());
    for _ in 0..10 {
        let views = tr.views(tr.state.step).unwrap();
        let t = tr.state.step;
        let m = tr.step_with(&views, t, &StepControl::default()).unwrap();
        tr.state.step += 1;
        leaks.push(m.audit.mask_gen_in_encoder_update.max(m.audit.student_in_mask_update));
    }
    let moved = tr.state.student.checksum() != enc0 && tr.state.mask_gen.checksum() != mask0;
    let worst = leaks.iter().cloned().fold(0.0f32, f32::max);
    report(
        "gradient_isolation",
        worst == 0.0 && moved,
        &format!("largest cross-group gradient over 10 steps {worst:e}; both groups updated: {moved}"),
    );
}

#[test]
fn adversary_sanity() {
    let t0 = Instant::now();
    let mut cfg = TrainConfig::desk();
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    let data = small_data(8, 12);
    let measure = |tr: &mut Trainer, views| tr.step_with(views, 0, &StepControl::measure()).unwrap().report.l_mpm;

    let mut tr = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let views = tr.views(0).unwrap();
    let before_mask = measure(&mut tr, &views);
    let ctl = StepControl {
        update_encoder: false,
        update_mask_gen: true,
        update_teacher: false,
        stochastic: false,
        lr: Some((0.0, cfg.lr_mask)),
    };
    for _ in 0..50 {
        tr.step_with(&views, 0, &ctl).unwrap();
    }
    let after_mask = measure(&mut tr, &views);

    let mut tr = Trainer::new(cfg.clone(), data).unwrap();
    let before_enc = measure(&mut tr, &views);
    let ctl = StepControl {
        update_encoder: true,
        update_mask_gen: false,
        update_teacher: false,
        stochastic: false,
        lr: Some((cfg.lr_enc, 0.0)),
    };
    for _ in 0..50 {
        tr.step_with(&views, 0, &ctl).unwrap();
    }
    let after_enc = measure(&mut tr, &views);

    let up = (after_mask - before_mask) / before_mask;
    let down = (before_enc - after_enc) / before_enc;
    let secs = t0.elapsed().as_secs_f64();
    report(
        "adversary_sanity",
        up > 0.05 && down > 0.05 && secs < 600.0,
        &format!(
            "mask-generator steps: L_MPM {before_mask:.4} -> {after_mask:.4} ({:+.1}%); encoder steps: \
             {before_enc:.4} -> {after_enc:.4} ({:+.1}%); {secs:.0}s",
            100.0 * up,
            -100.0 * down
        ),
    );
}

/// Desk runs shared by the collapse guard, the end-to-end experiment and
/// the ablation.
struct DeskRuns {
    root: PathBuf,
    data: PathBuf,
    adversarial: Vec<(ProbeResult, ProbeResult)>,
    adversarial_secs: f64,
    random: ProbeResult,
    block: ProbeResult,
}

fn train_and_probe(root: &Path, data: &Path, seed: u64, masking: Masking) -> (ProbeResult, ProbeResult) {
    let config = desk_with_seed(root, seed);
    let out = root.join(format!("{masking}_seed{seed}"));
    let ckpt = pretrain(&PretrainArgs {
        config: config.clone(),
        data: data.to_path_buf(),
        out: out.clone(),
        masking: Some(masking),
        seed: None,
        resume: None,
        stop_after: None,
    })
    .unwrap();
    probe(&ProbeArgs {
        config,
        data: data.to_path_buf(),
        checkpoint: ckpt,
        out: out.join("probe"),
        seeds: 10,
    })
    .unwrap()
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = scratch("desk");
        let data = root.join("data");
        gen_data(&GenDataArgs {
            out: data.clone(),
            per_class: 200,
            classes: vec![ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Torus, ShapeClass::Plane],
            points: 512,
            noise: 0.3,
            seed: 0,
        })
        .unwrap();
        let t0 = Instant::now();
        let adversarial = (0..3)
            .map(|s| train_and_probe(&root, &data, s, Masking::Adversarial))
            .collect();
        let adversarial_secs = t0.elapsed().as_secs_f64();
        let random = train_and_probe(&root, &data, 0, Masking::Random).0;
        let block = train_and_probe(&root, &data, 0, Masking::Block).0;
        DeskRuns {
            root,
            data,
            adversarial,
            adversarial_secs,
            random,
            block,
        }
    })
}

#[test]
fn collapse_guard() {
    let runs = desk_runs();
    let metrics = read_metrics(runs.root.join("adversarial_seed0").join("metrics.csv")).unwrap();
    let floor = 0.1 * (TrainConfig::desk().prototypes as f64).ln();
    let (at, min) = metrics
        .iter()
        .map(|(s, r)| (*s, r[7]))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    report(
        "collapse_guard",
        metrics.len() == TrainConfig::desk().steps && min >= floor,
        &format!(
            "{} steps; minimum teacher CLS entropy {min:.4} at step {at}, final {:.4}; floor 0.1 log K = {floor:.4}, log K = {:.4}",
            metrics.len(),
            metrics.last().map_or(f64::NAN, |(_, r)| r[7]),
            10.0 * floor
        ),
    );
}

#[test]
fn end_to_end_desk() {
    let runs = desk_runs();
    let n = runs.adversarial.len() as f64;
    let pre = runs.adversarial.iter().map(|r| r.0.accuracy_mean).sum::<f64>() / n;
    let rnd = runs.adversarial.iter().map(|r| r.1.accuracy_mean).sum::<f64>() / n;
    let per_seed: Vec<String> = runs
        .adversarial
        .iter()
        .enumerate()
        .map(|(s, (a, b))| format!("seed {s}: {:.2}% vs {:.2}%", 100.0 * a.accuracy_mean, 100.0 * b.accuracy_mean))
        .collect();
    let mins = runs.adversarial_secs / 60.0;
    report(
        "end_to_end_desk",
        pre >= 0.80 && pre - rnd >= 0.10 && mins < 45.0,
        &format!(
            "pretrained {:.2}% vs random-init {:.2}% (gap {:+.2} pp) over 3 seeds [{}]; {mins:.1} min for 3 runs on {} thread(s); data {}",
            100.0 * pre,
            100.0 * rnd,
            100.0 * (pre - rnd),
            per_seed.join("; "),
            rayon::current_num_threads(),
            runs.data.display()
        ),
    );
}

#[test]
fn ablation_harness() {
    let runs = desk_runs();
    let mut rows = [
        ("adversarial", &runs.adversarial[0].0),
        ("random", &runs.random),
        ("block", &runs.block),
    ];
    let comparable = rows
        .iter()
        .all(|(_, r)| r.n_test == rows[0].1.n_test && r.n_classes == rows[0].1.n_classes && r.accuracy_mean.is_finite());
    rows.sort_by(|a, b| b.1.accuracy_mean.total_cmp(&a.1.accuracy_mean));
    let order: Vec<String> = rows
        .iter()
        .map(|(n, r)| format!("{n} {:.2}% +- {:.2}", 100.0 * r.accuracy_mean, 100.0 * r.accuracy_std))
        .collect();
    report(
        "ablation_harness",
        comparable,
        &format!("seed 0, ratio 0.10-0.45 for baselines; reported ordering: {}", order.join(" > ")),
    );
}

fn cli(args: &[String]) -> i32 {
    let mut all = vec!["pcam".to_string(), "--deterministic".to_string()];
    all.extend_from_slice(args);
    main_with_args(all)
}

fn strings(args: &[&str]) -> Vec<String> {
    args.iter().map(|a| a.to_string()).collect()
}

#[test]
fn determinism_and_resume() {
    let root = scratch("determinism");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    assert_eq!(cli(&strings(&["gen-data", "--out", &s(&data), "--per-class", "8", "--points", "512"])), 0);
    let config = desk_with_seed(&root, 5);
    let run = |name: &str, extra: &[&str]| {
        let out = root.join(name);
        let mut args = strings(&["pretrain", "--config", &s(&config), "--data", &s(&data), "--out", &s(&out)]);
        args.extend(strings(extra));
        assert_eq!(cli(&args), 0);
        out
    };
    let a = run("a", &["--stop-after", "10"]);
    let b = run("b", &["--stop-after", "10"]);
    let bytes = |p: &Path| std::fs::read(p.join("metrics.csv")).unwrap();
    let identical = bytes(&a) == bytes(&b);

    let c = run("c", &["--stop-after", "5"]);
    let ck = s(&c.join("step_5.ckpt"));
    run("c", &["--stop-after", "10", "--resume", &ck]);
    let ma = read_metrics(a.join("metrics.csv")).unwrap();
    let mc = read_metrics(c.join("metrics.csv")).unwrap();
    let mut dev = 0.0f64;
    for ((sa, ra), (sc, rc)) in ma.iter().zip(&mc) {
        assert_eq!(sa, sc);
        for k in 0..4 {
            dev = dev.max((ra[k] - rc[k]).abs());
        }
    }
    report(
        "determinism_and_resume",
        identical && ma.len() == 10 && mc.len() == 10 && dev <= 1e-6,
        &format!("10-step metrics bit-identical: {identical}; resume at step 5 max loss dev {dev:.1e}"),
    );
}

#[test]
fn parameter_counts_paper_config() {
    let (enc, mask) = parameter_counts(&TrainConfig::paper().model());
    let (e_rel, m_rel) = (enc as f64 / 21.8e6 - 1.0, mask as f64 / 6.0e6 - 1.0);
    report(
        "parameter_counts",
        e_rel.abs() <= 0.15 && m_rel.abs() <= 0.15,
        &format!(
            "encoder {:.2}M ({:+.1}% vs 21.8M), mask generator {:.2}M ({:+.1}% vs 6.0M)",
            enc as f64 / 1e6,
            100.0 * e_rel,
            mask as f64 / 1e6,
            100.0 * m_rel
        ),
    );
}
