//! Optimizers, schedules, view construction and the adversarial training
//! loop.

mod config;
mod optim;
mod step;
mod views;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;

use crate::dataio::Checkpoint;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::{mask_gen_specs, student_specs, ModelConfig, ParamStore};
use crate::numerics::Tensor;
use crate::objective::DistillState;

pub use config::{Masking, TrainConfig, DESK_CFG, PAPER_CFG};
pub use optim::{lr_schedule, momentum_schedule, AdamW, ADAM_EPS, BETA1, BETA2};
pub use step::{GradAudit, StepControl, StepMetrics, METRICS_HEADER};
pub use views::{batch_views, build_views, stream_rng, BatchViews, CloudViews};

pub const METRICS_FILE: &str = "metrics.csv";

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub step: usize,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub mask_gen: ParamStore,
    pub opt_enc: AdamW,
    pub opt_mask: AdamW,
    pub distill: DistillState,
}

impl TrainState {
    /// Fresh parameters; the teacher starts as a copy of the student.
    pub fn init(cfg: &TrainConfig) -> Self {
        let model = cfg.model();
        let student = ParamStore::init(&student_specs(&model), &mut stream_rng(cfg.seed, "init", 0, 0));
        let mask_gen = ParamStore::init(&mask_gen_specs(&model.mask_gen), &mut stream_rng(cfg.seed, "init", 1, 0));
        Self {
            step: 0,
            teacher: student.clone(),
            opt_enc: AdamW::new(&student, cfg.weight_decay),
            opt_mask: AdamW::new(&mask_gen, cfg.weight_decay),
            student,
            mask_gen,
            distill: DistillState::new(cfg.prototypes, cfg.center_momentum, cfg.teacher_temp_start, cfg.student_temp),
        }
    }

    /// Student tensors keep their own names (`encoder.*`, `projector.*`,
    /// `mask_token`), as do the mask generator's (`mask_gen.*`).
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.student.export(&mut ck, "");
        self.mask_gen.export(&mut ck, "");
        self.teacher.export(&mut ck, "teacher.");
        self.opt_enc.export(&mut ck, "adam_enc.");
        self.opt_mask.export(&mut ck, "adam_mask.");
        let k = self.distill.center_cls.len();
        for (name, c) in [("center.cls", &self.distill.center_cls), ("center.patch", &self.distill.center_patch)] {
            ck.tensors
                .insert(name.into(), Tensor::new([k], c.clone()).expect("center length"));
        }
        ck.meta.insert("step".into(), self.step.to_string());
        ck.meta.insert("config_hash".into(), cfg.content_hash());
        ck.meta.insert("teacher_temp".into(), format!("{:e}", self.distill.teacher_temp));
        ck
    }

    pub fn from_checkpoint(cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        match ck.meta.get("config_hash") {
            Some(h) if *h == cfg.content_hash() => {}
            Some(_) => return Err(Error::config("checkpoint was written under a different config")),
            None => return Err(Error::Integrity("checkpoint has no config hash".into())),
        }
        let mut s = Self::init(cfg);
        s.student.import(ck, "")?;
        s.mask_gen.import(ck, "")?;
        s.teacher.import(ck, "teacher.")?;
        s.opt_enc.import(ck, "adam_enc.")?;
        s.opt_mask.import(ck, "adam_mask.")?;
        let center = |name: &str| -> Result<Vec<f32>> {
            let t = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::Integrity(format!("missing {name}")))?;
            if t.shape() != [cfg.prototypes] {
                return Err(Error::Integrity(format!("{name} has shape {:?}", t.shape())));
            }
            Ok(t.data().to_vec())
        };
        s.distill.center_cls = center("center.cls")?;
        s.distill.center_patch = center("center.patch")?;
        let meta = |key: &str| -> Result<&String> {
            ck.meta
                .get(key)
                .ok_or_else(|| Error::Integrity(format!("missing meta {key}")))
        };
        s.step = meta("step")?
            .parse()
            .map_err(|_| Error::Integrity("bad step".into()))?;
        s.distill.teacher_temp = meta("teacher_temp")?
            .parse()
            .map_err(|_| Error::Integrity("bad teacher_temp".into()))?;
        Ok(s)
    }
}

/// Training run over an in-memory dataset.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelConfig,
    pub state: TrainState,
    data: Vec<PointCloud>,
}

/// Outcome of [`Trainer::run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub last: Option<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
}

pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step}.ckpt")
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Vec<PointCloud>) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::arg("training set is empty"));
        }
        let state = TrainState::init(&cfg);
        Ok(Self {
            model: cfg.model(),
            cfg,
            state,
            data,
        })
    }

    pub fn resume(cfg: TrainConfig, data: Vec<PointCloud>, checkpoint: impl AsRef<Path>) -> Result<Self> {
        let mut t = Self::new(cfg, data)?;
        let ck = Checkpoint::load(checkpoint, None)?;
        t.state = TrainState::from_checkpoint(&t.cfg, &ck)?;
        Ok(t)
    }

    /// Clouds of the batch at step `t`, drawn without replacement when the
    /// dataset is large enough.
    pub fn batch(&self, t: usize) -> Vec<PointCloud> {
        let mut rng = stream_rng(self.cfg.seed, "batch", t as u64, 0);
        let n = self.data.len();
        let idx: Vec<usize> = if n >= self.cfg.batch {
            sample(&mut rng, n, self.cfg.batch).into_vec()
        } else {
            (0..self.cfg.batch).map(|_| rng.gen_range(0..n)).collect()
        };
        idx.into_iter().map(|i| self.data[i].clone()).collect()
    }

    pub fn views(&self, t: usize) -> Result<BatchViews> {
        batch_views(&self.batch(t), &self.cfg, t as u64)
    }

    /// One step on given views with schedules evaluated at `t`. The step
    /// counter is left alone.
    pub fn step_with(&mut self, views: &BatchViews, t: usize, ctl: &StepControl) -> Result<StepMetrics> {
        step::step_on(&self.cfg, &self.model, &mut self.state, views, t, ctl)
    }

    /// The next regular training step. Fails if gradients leak across
    /// parameter groups.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let t = self.state.step;
        if t >= self.cfg.steps {
            return Err(Error::arg(format!("training already finished {} steps", self.cfg.steps)));
        }
        let views = self.views(t)?;
        let m = self.step_with(&views, t, &StepControl::default())?;
        if !m.audit.is_isolated() {
            return Err(Error::contract(format!("gradient leak at step {t}: {:?}", m.audit)));
        }
        self.state.step += 1;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.state.to_checkpoint(&self.cfg).save(path)
    }

    /// Train until `until` completed steps (all configured steps when
    /// `None`), appending to `metrics.csv` in `out` and writing periodic
    /// and final checkpoints. On resume, metric rows past the resumed step
    /// are dropped first.
    pub fn run(
        &mut self,
        out: impl AsRef<Path>,
        until: Option<usize>,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<RunSummary> {
        let out = out.as_ref();
        fs::create_dir_all(out)?;
        let until = until.unwrap_or(self.cfg.steps).min(self.cfg.steps);
        let metrics = out.join(METRICS_FILE);
        prepare_metrics(&metrics, self.state.step)?;
        let mut file = OpenOptions::new().append(true).open(&metrics)?;
        let mut summary = RunSummary {
            last: None,
            checkpoints: Vec::new(),
            metrics: metrics.clone(),
        };
        while self.state.step < until {
            let m = self.step()?;
            writeln!(file, "{}", m.csv_row())?;
            on_step(&m);
            let done = self.state.step;
            if done % 50 == 0 || done == until {
                log::info!(
                    "step {done}/{}: l_mpm {:.4} l_cls {:.4} l_spar {:.4} l_div {:.4} entropy {:.3}",
                    self.cfg.steps,
                    m.report.l_mpm,
                    m.report.l_cls,
                    m.report.l_spar,
                    m.report.l_div,
                    m.teacher_entropy
                );
            }
            let periodic = self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0;
            if periodic || done == until {
                let path = out.join(checkpoint_name(done));
                self.save(&path)?;
                summary.checkpoints.push(path);
            }
            summary.last = Some(m);
        }
        file.flush()?;
        Ok(summary)
    }
}

fn prepare_metrics(path: &Path, completed: usize) -> Result<()> {
    let mut text = format!("{METRICS_HEADER}\n");
    if completed > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < completed) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// Metric rows of a CSV written by [`Trainer::run`], as
/// `(step, [l_mpm, l_cls, l_spar, l_div, lr_enc, lr_mask, lambda, entropy])`.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<(usize, [f64; 8])>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Missing {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::format(i as u64, format!("malformed metrics row {line:?}"));
        let mut cols = line.split(',');
        let step = cols.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let mut vals = [0.0; 8];
        for v in vals.iter_mut() {
            *v = cols.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        }
        rows.push((step, vals));
    }
    Ok(rows)
}
