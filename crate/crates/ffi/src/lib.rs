//! C interface to `pcam`.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released by the matching `*_free`. Every fallible call returns a
//! [`PcamStatus`]; on failure the message is kept per thread and can be
//! read with [`pcam_last_error_message`]. Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pcam::dataio::{DatasetManifest, Split};
use pcam::eval::FeatureExtractor;
use pcam::geometry::{fps_from, PointCloud};
use pcam::trainer::{TrainConfig, Trainer};
use pcam::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Format = 4,
    Integrity = 5,
    NonFinite = 6,
    Missing = 7,
    Io = 8,
    Shape = 9,
    Contract = 10,
    Panic = 11,
}

/// Losses of one training step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PcamLossReport {
    pub step: u64,
    pub l_mpm: f64,
    pub l_cls: f64,
    pub l_spar: f64,
    pub l_div: f64,
    pub l_encoder_total: f64,
    pub l_mask_total: f64,
    pub teacher_entropy: f64,
}

/// Training hyperparameters.
pub struct PcamConfig(TrainConfig);

/// Frozen encoder producing one feature row per cloud.
pub struct PcamExtractor(FeatureExtractor);

/// Training run over the train split of a dataset directory.
pub struct PcamTrainer(Trainer);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> PcamStatus {
    match err {
        Error::Shape { .. } => PcamStatus::Shape,
        Error::Contract(_) => PcamStatus::Contract,
        Error::Argument(_) => PcamStatus::InvalidArgument,
        Error::Config(_) => PcamStatus::Config,
        Error::Format { .. } => PcamStatus::Format,
        Error::Integrity(_) => PcamStatus::Integrity,
        Error::NonFinite(_) => PcamStatus::NonFinite,
        Error::Missing { .. } => PcamStatus::Missing,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => PcamStatus::Missing,
        Error::Io(_) => PcamStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PcamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            PcamStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            PcamStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PcamStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::Argument(format!("{what} is not UTF-8"))))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn handle<'a, T>(h: *const T, what: &'static str) -> Result<&'a T, Fail> {
    h.as_ref().ok_or(Fail::Null(what))
}

unsafe fn handle_mut<'a, T>(h: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    h.as_mut().ok_or(Fail::Null(what))
}

unsafe fn points_arg(points: *const f32, n_points: usize) -> Result<Vec<[f32; 3]>, Fail> {
    if points.is_null() {
        return Err(Fail::Null("points"));
    }
    let flat = std::slice::from_raw_parts(points, n_points * 3);
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pcam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the calling thread's last error message, without
/// the terminating NUL.
#[no_mangle]
pub extern "C" fn pcam_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copy the last error message into `buf` (NUL-terminated, truncated to
/// `len - 1` bytes). Returns the full message length.
#[no_mangle]
pub unsafe extern "C" fn pcam_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Parse a config file.
#[no_mangle]
pub unsafe extern "C" fn pcam_config_load(path: *const c_char, out: *mut *mut PcamConfig) -> PcamStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        out_arg(out, PcamConfig(TrainConfig::load(path)?))
    })
}

/// The bundled desk-scale config.
#[no_mangle]
pub unsafe extern "C" fn pcam_config_desk(out: *mut *mut PcamConfig) -> PcamStatus {
    guard(|| out_arg(out, PcamConfig(TrainConfig::desk())))
}

/// Override the seed of a config.
#[no_mangle]
pub unsafe extern "C" fn pcam_config_set_seed(cfg: *mut PcamConfig, seed: u64) -> PcamStatus {
    guard(|| {
        handle_mut(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// Override the number of training steps of a config.
#[no_mangle]
pub unsafe extern "C" fn pcam_config_set_steps(cfg: *mut PcamConfig, steps: usize) -> PcamStatus {
    guard(|| {
        let c = &mut handle_mut(cfg, "cfg")?.0;
        let mut next = c.clone();
        next.steps = steps;
        next.validate()?;
        *c = next;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pcam_config_free(cfg: *mut PcamConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Extractor with freshly initialized weights.
#[no_mangle]
pub unsafe extern "C" fn pcam_extractor_random(cfg: *const PcamConfig, out: *mut *mut PcamExtractor) -> PcamStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        out_arg(out, PcamExtractor(FeatureExtractor::random_init(&cfg.0)))
    })
}

/// Extractor with the encoder weights of a checkpoint.
#[no_mangle]
pub unsafe extern "C" fn pcam_extractor_load(
    cfg: *const PcamConfig,
    checkpoint: *const c_char,
    out: *mut *mut PcamExtractor,
) -> PcamStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let path = path_arg(checkpoint, "checkpoint")?;
        out_arg(out, PcamExtractor(FeatureExtractor::from_checkpoint(&cfg.0, path)?))
    })
}

/// Width of a feature row, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pcam_extractor_width(ex: *const PcamExtractor) -> usize {
    ex.as_ref().map_or(0, |e| e.0.width())
}

/// Features of one cloud given as `n_points` xyz triples. `out` must hold
/// `out_len >= pcam_extractor_width(ex)` floats.
#[no_mangle]
pub unsafe extern "C" fn pcam_extractor_extract(
    ex: *const PcamExtractor,
    points: *const f32,
    n_points: usize,
    out: *mut f32,
    out_len: usize,
) -> PcamStatus {
    guard(|| {
        let ex = handle(ex, "extractor")?;
        let pts = points_arg(points, n_points)?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let w = ex.0.width();
        if out_len < w {
            return Err(Fail::Core(Error::Argument(format!("output holds {out_len} floats, need {w}"))));
        }
        let cloud = PointCloud::new(pts)?;
        let row = ex.0.extract(std::slice::from_ref(&cloud))?.remove(0);
        ptr::copy_nonoverlapping(row.as_ptr(), out, w);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pcam_extractor_free(ex: *mut PcamExtractor) {
    if !ex.is_null() {
        drop(Box::from_raw(ex));
    }
}

/// Trainer over the train split of the dataset in `data_dir`.
#[no_mangle]
pub unsafe extern "C" fn pcam_trainer_new(
    cfg: *const PcamConfig,
    data_dir: *const c_char,
    out: *mut *mut PcamTrainer,
) -> PcamStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let dir = path_arg(data_dir, "data_dir")?;
        let ds = DatasetManifest::load(&dir)?;
        let train = ds.read_split(&dir, Some(Split::Train))?;
        out_arg(out, PcamTrainer(Trainer::new(cfg.0.clone(), train)?))
    })
}

/// Run the next training step; `report` may be null.
#[no_mangle]
pub unsafe extern "C" fn pcam_trainer_step(tr: *mut PcamTrainer, report: *mut PcamLossReport) -> PcamStatus {
    guard(|| {
        let tr = handle_mut(tr, "trainer")?;
        let m = tr.0.step()?;
        if let Some(r) = report.as_mut() {
            *r = PcamLossReport {
                step: m.step as u64,
                l_mpm: m.report.l_mpm,
                l_cls: m.report.l_cls,
                l_spar: m.report.l_spar,
                l_div: m.report.l_div,
                l_encoder_total: m.report.l_encoder_total,
                l_mask_total: m.report.l_mask_total,
                teacher_entropy: m.teacher_entropy,
            };
        }
        Ok(())
    })
}

/// Completed steps, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pcam_trainer_steps_done(tr: *const PcamTrainer) -> usize {
    tr.as_ref().map_or(0, |t| t.0.state.step)
}

/// Write the full training state as a checkpoint.
#[no_mangle]
pub unsafe extern "C" fn pcam_trainer_save(tr: *const PcamTrainer, path: *const c_char) -> PcamStatus {
    guard(|| {
        let tr = handle(tr, "trainer")?;
        let path = path_arg(path, "path")?;
        tr.0.save(path)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pcam_trainer_free(tr: *mut PcamTrainer) {
    if !tr.is_null() {
        drop(Box::from_raw(tr));
    }
}

/// Furthest point sampling of `p` indices from `n_points` xyz triples,
/// starting at index `start`. `out` must hold `p` entries.
#[no_mangle]
pub unsafe extern "C" fn pcam_fps(
    points: *const f32,
    n_points: usize,
    p: usize,
    start: usize,
    out: *mut usize,
) -> PcamStatus {
    guard(|| {
        let pts = points_arg(points, n_points)?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let idx = fps_from(&pts, p, start)?;
        ptr::copy_nonoverlapping(idx.as_ptr(), out, idx.len());
        Ok(())
    })
}
