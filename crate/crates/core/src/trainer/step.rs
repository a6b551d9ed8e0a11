use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::eval::{baseline_masks, BaselineKind};
use crate::model::{
    embed_patches, encode, generate_masks, prepend_cls, projector_head, projector_trunk, Bound, Head, Mode,
    ModelConfig, ParamStore, TokenSequence,
};
use crate::numerics::{Gradients, Graph, Tensor, Var};
use crate::objective::{
    apply_mask, cls_loss, combine_losses, diversity_loss, ema_update, mean_entropy, mpm_loss, sparsity_loss,
    student_log_probs, teacher_temperature, LossReport, Stream,
};

use super::{lr_schedule, momentum_schedule, stream_rng, BatchViews, Masking, TrainState};
use super::TrainConfig;

/// Which parts of the state a step may change.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepControl {
    pub update_encoder: bool,
    pub update_mask_gen: bool,
    /// EMA teacher update and center updates.
    pub update_teacher: bool,
    /// Stochastic depth in student and mask generator.
    pub stochastic: bool,
    /// `(encoder, mask generator)` learning rates replacing the schedule.
    pub lr: Option<(f64, f64)>,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            update_encoder: true,
            update_mask_gen: true,
            update_teacher: true,
            stochastic: true,
            lr: None,
        }
    }
}

impl StepControl {
    /// Losses only; nothing is updated and no noise is drawn.
    pub fn measure() -> Self {
        Self {
            update_encoder: false,
            update_mask_gen: false,
            update_teacher: false,
            stochastic: false,
            lr: None,
        }
    }
}

/// Largest absolute gradient that leaked across parameter groups.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradAudit {
    /// Mask-generator gradients of the encoder objective.
    pub mask_gen_in_encoder_update: f32,
    /// Student gradients of the mask objective.
    pub student_in_mask_update: f32,
}

impl GradAudit {
    pub fn is_isolated(&self) -> bool {
        self.mask_gen_in_encoder_update == 0.0 && self.student_in_mask_update == 0.0
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub report: LossReport,
    pub lr_enc: f64,
    pub lr_mask: f64,
    pub lambda: f64,
    pub teacher_entropy: f64,
    pub audit: GradAudit,
}

pub const METRICS_HEADER: &str = "step,l_mpm,l_cls,l_spar,l_div,lr_enc,lr_mask,lambda,teacher_entropy";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, r.l_mpm, r.l_cls, r.l_spar, r.l_div, self.lr_enc, self.lr_mask, self.lambda, self.teacher_entropy
        )
    }
}

struct TeacherOut {
    cls_logits: Tensor<f32>,
    patch_logits: Tensor<f32>,
}

fn teacher_forward(model: &ModelConfig, teacher: &ParamStore, views: &BatchViews) -> Result<TeacherOut> {
    let mut g = Graph::<f32>::new();
    let p = teacher.bind(&mut g, false);
    let groups = g.constant(views.global_groups.clone());
    let centers = g.constant(views.global_centers.clone());
    let seq = embed_patches(&mut g, &p, groups, centers)?;
    let seq = prepend_cls(&mut g, &p, seq)?;
    let enc = encode(&mut g, &p, &model.encoder, seq, &mut Mode::Eval)?;
    let (cls, patches) = heads(&mut g, &p, enc.seq)?;
    Ok(TeacherOut {
        cls_logits: g.value(cls).clone(),
        patch_logits: g.value(patches).clone(),
    })
}

/// CLS logits `[s, K]` and patch logits `[s, p, K]` of encoded tokens.
fn heads(g: &mut Graph<f32>, p: &Bound, seq: TokenSequence) -> Result<(Var, Var)> {
    let z = projector_trunk(g, p, seq.x)?;
    let s = g.shape(z)[0];
    let width = g.shape(z)[2];
    let zc = g.narrow(z, 1, 0, 1)?;
    let zc = g.reshape(zc, &[s, width])?;
    let zp = g.narrow(z, 1, 1, seq.patches)?;
    let cls = projector_head(g, p, Head::Cls, zc)?;
    let patches = projector_head(g, p, Head::Patch, zp)?;
    Ok((cls, patches))
}

/// CLS logits `[s, K]` only.
fn cls_head(g: &mut Graph<f32>, p: &Bound, seq: TokenSequence) -> Result<Var> {
    let s = g.shape(seq.x)[0];
    let row = g.narrow(seq.x, 1, 0, 1)?;
    let row = g.reshape(row, &[s, seq.dim])?;
    let z = projector_trunk(g, p, row)?;
    projector_head(g, p, Head::Cls, z)
}

fn max_abs(grads: &Gradients<f32>, bound: &Bound) -> f32 {
    bound
        .iter()
        .filter(|(_, v)| grads.touched(*v))
        .map(|(_, v)| grads.get(v).data().iter().fold(0.0f32, |a, x| a.max(x.abs())))
        .fold(0.0, f32::max)
}

fn collect(grads: &mut Gradients<f32>, bound: &Bound) -> BTreeMap<String, Tensor<f32>> {
    bound.iter().map(|(k, v)| (k.to_string(), grads.take(v))).collect()
}

fn binary_masks(
    kind: BaselineKind,
    cfg: &TrainConfig,
    centers: &Tensor<f32>,
    copies: usize,
    step: usize,
    stream: &str,
) -> Result<Tensor<f32>> {
    let (s, p) = (centers.shape()[0], centers.shape()[1]);
    let mut data = Vec::with_capacity(s * copies * p);
    for i in 0..s {
        let pts: Vec<[f32; 3]> = centers.data()[i * p * 3..(i + 1) * p * 3]
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let mut rng = stream_rng(cfg.seed, stream, step as u64, i as u64);
        for _ in 0..copies {
            data.extend(baseline_masks(kind, &pts, cfg.mask_ratio, &mut rng)?);
        }
    }
    Tensor::new([s, copies, p], data)
}

/// Picks mask `i mod n` for local view `i`: `[s, n, p] -> [s, 1, p]`.
fn select_local(g: &mut Graph<f32>, m: Var, per_cloud: usize) -> Result<Var> {
    let shape = g.shape(m).to_vec();
    let (s, n, p) = (shape[0], shape[1], shape[2]);
    let onehot = Tensor::from_fn([s, n, 1], |i| if i % n == (i / n % per_cloud) % n { 1.0 } else { 0.0 });
    let onehot = g.constant(onehot);
    let picked = g.mul(m, onehot)?;
    let picked = g.sum_axis(picked, 1)?;
    g.reshape(picked, &[s, 1, p])
}

/// One optimization step on prepared views. `t` indexes the schedules.
pub(crate) fn step_on(
    cfg: &TrainConfig,
    model: &ModelConfig,
    state: &mut TrainState,
    views: &BatchViews,
    t: usize,
    ctl: &StepControl,
) -> Result<StepMetrics> {
    let b = views.batch;
    let (n_global, n_local, n) = (cfg.n_global_views, cfg.n_local_views, cfg.n_masks);
    let sg = b * n_global;
    let p = views.global_groups.shape()[1];
    let k = cfg.prototypes;
    let adversarial = cfg.masking == Masking::Adversarial;
    let has_locals = n_local > 0 && views.local_groups.is_some();

    // Teacher targets.
    state.distill.teacher_temp = teacher_temperature(
        t,
        cfg.steps,
        cfg.teacher_temp_start,
        cfg.teacher_temp_end,
        cfg.teacher_temp_warmup_frac,
    );
    let teacher = teacher_forward(model, &state.teacher, views)?;
    let t_cls = state
        .distill
        .sharpen(&teacher.cls_logits, Stream::Cls)?
        .reshape([b, n_global, k])?;
    let t_patch = state
        .distill
        .sharpen(&teacher.patch_logits, Stream::Patch)?
        .reshape([sg, 1, p, k])?;
    let teacher_entropy = mean_entropy(&t_cls);

    let mut rng_mask = stream_rng(cfg.seed, "drop_mask", t as u64, 0);
    let mut rng_student = stream_rng(cfg.seed, "drop_student", t as u64, 0);
    let mut mode_mask = if ctl.stochastic { Mode::Train(&mut rng_mask) } else { Mode::Eval };

    // Masks. The adversarial generator sees detached student embeddings on
    // its own tape.
    let mut tape_b = None;
    let (m_global, m_local) = match cfg.masking {
        Masking::Adversarial => {
            let mut g = Graph::<f32>::new();
            let student = state.student.bind(&mut g, true);
            let masker = state.mask_gen.bind(&mut g, true);
            let groups = g.constant(views.global_groups.clone());
            let centers = g.constant(views.global_centers.clone());
            let seq = embed_patches(&mut g, &student, groups, centers)?;
            let x = g.detach(seq.x);
            let masks = generate_masks(&mut g, &masker, &model.mask_gen, TokenSequence { x, ..seq }, &mut mode_mask)?;
            let mg = g.value(masks.m).clone();
            let (ml, ml_var) = if cfg.mask_local_views && has_locals {
                let lg = g.constant(views.local_groups.clone().unwrap());
                let lc = g.constant(views.local_centers.clone().unwrap());
                let seq = embed_patches(&mut g, &student, lg, lc)?;
                let x = g.detach(seq.x);
                let lm = generate_masks(&mut g, &masker, &model.mask_gen, TokenSequence { x, ..seq }, &mut mode_mask)?;
                let sel = select_local(&mut g, lm.m, n_local)?;
                (Some(g.value(sel).clone()), Some(sel))
            } else {
                (None, None)
            };
            tape_b = Some((g, student, masker, masks.m, ml_var));
            (mg, ml)
        }
        Masking::Random | Masking::Block => {
            let kind = if cfg.masking == Masking::Random {
                BaselineKind::Random
            } else {
                BaselineKind::Block
            };
            let mg = binary_masks(kind, cfg, &views.global_centers, n, t, "masks")?;
            let ml = match (&views.local_centers, cfg.mask_local_views) {
                (Some(c), true) => Some(binary_masks(kind, cfg, c, 1, t, "local_masks")?),
                _ => None,
            };
            (mg, ml)
        }
    };

    // Student tape: the encoder objective with masks held constant.
    let mask_grads = adversarial && ctl.update_mask_gen;
    let mut ga = Graph::<f32>::new();
    let student_a = state.student.bind(&mut ga, true);
    let masker_a = state.mask_gen.bind(&mut ga, true);
    let mut mode_student = if ctl.stochastic { Mode::Train(&mut rng_student) } else { Mode::Eval };
    let m_leaf = ga.leaf(m_global.clone(), mask_grads);
    let groups = ga.constant(views.global_groups.clone());
    let centers = ga.constant(views.global_centers.clone());
    let mask_token = student_a.var("mask_token")?;
    let tokens = embed_patches(&mut ga, &student_a, groups, centers)?;
    let masked = apply_mask(&mut ga, tokens, m_leaf, mask_token)?;
    let masked = prepend_cls(&mut ga, &student_a, masked)?;
    let enc = encode(&mut ga, &student_a, &model.encoder, masked, &mut mode_student)?;
    let (s_cls, s_patch) = heads(&mut ga, &student_a, enc.seq)?;
    let lq_patch = student_log_probs(&mut ga, s_patch, cfg.student_temp)?;
    let lq_patch = ga.reshape(lq_patch, &[sg, n, p, k])?;
    let t_patch_v = ga.constant(t_patch);
    let weights = cfg
        .masked_positions_only
        .then(|| m_global.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }));
    let l_mpm = mpm_loss(&mut ga, lq_patch, t_patch_v, weights.as_ref())?;

    let global_cls = if cfg.cls_from_masked {
        let lq = student_log_probs(&mut ga, s_cls, cfg.student_temp)?;
        ga.reshape(lq, &[b, n_global, n, k])?
    } else {
        let plain = embed_patches(&mut ga, &student_a, groups, centers)?;
        let plain = prepend_cls(&mut ga, &student_a, plain)?;
        let enc = encode(&mut ga, &student_a, &model.encoder, plain, &mut mode_student)?;
        let logits = cls_head(&mut ga, &student_a, enc.seq)?;
        let lq = student_log_probs(&mut ga, logits, cfg.student_temp)?;
        ga.reshape(lq, &[b, n_global, 1, k])?
    };
    let mut m_local_leaf = None;
    let local_cls = if has_locals {
        let lg = ga.constant(views.local_groups.clone().unwrap());
        let lc = ga.constant(views.local_centers.clone().unwrap());
        let mut seq = embed_patches(&mut ga, &student_a, lg, lc)?;
        if let Some(ml) = &m_local {
            let leaf = ga.leaf(ml.clone(), mask_grads);
            m_local_leaf = Some(leaf);
            seq = apply_mask(&mut ga, seq, leaf, mask_token)?;
        }
        let seq = prepend_cls(&mut ga, &student_a, seq)?;
        let enc = encode(&mut ga, &student_a, &model.encoder, seq, &mut mode_student)?;
        let logits = cls_head(&mut ga, &student_a, enc.seq)?;
        let lq = student_log_probs(&mut ga, logits, cfg.student_temp)?;
        Some(ga.reshape(lq, &[b, n_local, k])?)
    } else {
        None
    };
    let t_cls_v = ga.constant(t_cls);
    let l_cls = cls_loss(&mut ga, t_cls_v, local_cls, global_cls)?;
    let l_enc = ga.add(l_mpm, l_cls)?;
    let (l_mpm_v, l_cls_v) = (ga.value(l_mpm).item() as f64, ga.value(l_cls).item() as f64);
    let mut grads_a = ga.backward(l_enc)?;
    let mut audit = GradAudit {
        mask_gen_in_encoder_update: max_abs(&grads_a, &masker_a),
        ..Default::default()
    };
    let student_grads = collect(&mut grads_a, &student_a);
    let g_m = grads_a.take(m_leaf);
    let g_ml = m_local_leaf.map(|v| grads_a.take(v));

    // Mask objective: alpha L_spar + beta L_div - (L_MPM + L_CLS), whose
    // last part enters through the mask gradients of the student tape.
    let (l_spar, l_div, mask_grads_map) = match tape_b {
        Some((mut g, student_b, masker_b, m, ml_var)) => {
            let spar = sparsity_loss(&mut g, m)?;
            let div = diversity_loss(&mut g, m)?;
            let (sv, dv) = (g.value(spar).item() as f64, g.value(div).item() as f64);
            let a = g.scale(spar, cfg.alpha as f32);
            let d = g.scale(div, cfg.beta as f32);
            let mut obj = g.add(a, d)?;
            for (var, grad) in [(Some(m), Some(g_m)), (ml_var, g_ml)] {
                if let (Some(var), Some(grad)) = (var, grad) {
                    let gc = g.constant(grad);
                    let inner = g.mul(var, gc)?;
                    let inner = g.sum(inner);
                    obj = g.sub(obj, inner)?;
                }
            }
            let mut grads_b = g.backward(obj)?;
            audit.student_in_mask_update = max_abs(&grads_b, &student_b);
            (sv, dv, Some(collect(&mut grads_b, &masker_b)))
        }
        None => {
            let mut g = Graph::<f32>::new();
            let m = g.constant(m_global);
            let spar = sparsity_loss(&mut g, m)?;
            let div = diversity_loss(&mut g, m)?;
            (g.value(spar).item() as f64, g.value(div).item() as f64, None)
        }
    };

    let report = combine_losses(l_mpm_v, l_cls_v, l_spar, l_div, cfg.alpha, cfg.beta);
    if !report.is_finite() {
        return Err(Error::NonFinite(format!("losses at step {t}: {report:?}")));
    }

    let (lr_enc, lr_mask) = match ctl.lr {
        Some(lr) => lr,
        None => {
            let warmup = cfg.warmup();
            (
                lr_schedule(t, cfg.steps, cfg.lr_enc, cfg.lr_min, warmup, cfg.k_decay)?,
                lr_schedule(t, cfg.steps, cfg.lr_mask, cfg.lr_min, warmup, cfg.k_decay)?,
            )
        }
    };
    let lambda = momentum_schedule(t, cfg.steps, cfg.momentum_start);
    if ctl.update_encoder {
        state.opt_enc.step(&mut state.student, &student_grads, lr_enc)?;
    }
    if let (true, Some(grads)) = (ctl.update_mask_gen, mask_grads_map) {
        state.opt_mask.step(&mut state.mask_gen, &grads, lr_mask)?;
    }
    if ctl.update_teacher {
        ema_update(&mut state.teacher, &state.student, lambda)?;
        state.distill.update_center(&teacher.cls_logits, Stream::Cls);
        state.distill.update_center(&teacher.patch_logits, Stream::Patch);
    }
    Ok(StepMetrics {
        step: t,
        report,
        lr_enc,
        lr_mask,
        lambda,
        teacher_entropy,
        audit,
    })
}
