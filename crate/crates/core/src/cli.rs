//! The `pcam` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dataio::{
    gen_synthetic, read_cloud, split_counts, write_cloud, DatasetManifest, ManifestEntry, ShapeClass, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    export_masks, fewshot_eval, linear_probe, widen, FeatureExtractor, MaskExporter, ProbeConfig, ProbeResult,
};
use crate::geometry::{patchify, PointCloud};
use crate::trainer::{checkpoint_name, stream_rng, Masking, TrainConfig, Trainer};

pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_CONFIG: i32 = 64;
pub const EXIT_MISSING: i32 = 66;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Config(_) | Error::Argument(_) => EXIT_CONFIG,
        Error::Missing { .. } => EXIT_MISSING,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        _ => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "pcam", version, about = "Adversarial-masking self-distillation for point clouds")]
pub struct Cli {
    /// Run on a single thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic dataset with a manifest.
    GenData(GenDataArgs),
    /// Self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Linear probe of pretrained and randomly initialized encoders.
    Probe(ProbeArgs),
    /// Few-shot episodes on frozen features.
    Fewshot(FewshotArgs),
    /// Write the learned masks of one cloud as point files.
    ExportMasks(ExportArgs),
    /// FPS plus kNN grouping throughput.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, value_delimiter = ',', default_value = "sphere,cube,torus,plane")]
    pub classes: Vec<ShapeClass>,
    #[arg(long, default_value_t = 512)]
    pub points: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub masking: Option<Masking>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written under the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub way: usize,
    #[arg(long, default_value_t = 10)]
    pub shot: usize,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 20)]
    pub query: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub clouds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Record of one command invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub artifacts: Vec<String>,
    pub config: Option<TrainConfig>,
}

pub const RUN_MANIFEST: &str = "run.toml";

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_path: None,
            config_hash: None,
            seed,
            started_unix: now(),
            finished_unix: 0.0,
            artifacts: Vec::new(),
            config: None,
        }
    }

    fn with_config(mut self, path: &Path, cfg: &TrainConfig) -> Self {
        self.config_path = Some(path.display().to_string());
        self.config_hash = Some(cfg.content_hash());
        self.config = Some(cfg.clone());
        self
    }

    /// Check that every artifact exists, then write `run.toml` in `dir`
    /// through a temporary file.
    fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        for a in &self.artifacts {
            if !Path::new(a).exists() {
                return Err(Error::contract(format!("artifact {a} was not written")));
            }
        }
        self.finished_unix = now();
        let text = toml::to_string(&self).map_err(|e| Error::contract(e.to_string()))?;
        let path = dir.join(RUN_MANIFEST);
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    fn add(&mut self, p: &Path) {
        self.artifacts.push(p.display().to_string());
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn configure_threads(deterministic: bool) -> Result<()> {
    let threads = if deterministic {
        Some(1)
    } else {
        match std::env::var("PCAM_THREADS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Error::config(format!("PCAM_THREADS must be a positive integer, got {v:?}")))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = threads {
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.deterministic)?;
    match cli.command {
        Command::GenData(a) => gen_data(&a).map(|_| ()),
        Command::Pretrain(a) => pretrain(&a).map(|_| ()),
        Command::Probe(a) => probe(&a).map(|_| ()),
        Command::Fewshot(a) => fewshot(&a).map(|_| ()),
        Command::ExportMasks(a) => export(&a).map(|_| ()),
        Command::Bench(a) => bench(&a).map(|_| ()),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing {
            path: path.to_path_buf(),
            msg: "not found".into(),
        })
    }
}

/// Clouds named `{class}_{i}.pcam`, split per class by the 70/10/20 rule.
pub fn gen_data(a: &GenDataArgs) -> Result<DatasetManifest> {
    if a.classes.is_empty() {
        return Err(Error::arg("no classes given"));
    }
    fs::create_dir_all(&a.out)?;
    let mut manifest = RunManifest::new("gen-data", a.seed);
    let (n_train, n_val, _) = split_counts(a.per_class);
    let mut entries = Vec::new();
    for (label, &class) in a.classes.iter().enumerate() {
        for i in 0..a.per_class {
            let mut rng = stream_rng(a.seed, "data", label as u64, i as u64);
            let cloud = gen_synthetic(class, a.points, a.noise, &mut rng)?;
            let name = format!("{class}_{i:04}.pcam");
            write_cloud(a.out.join(&name), &cloud)?;
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            entries.push(ManifestEntry {
                path: name,
                label,
                split,
            });
        }
    }
    let ds = DatasetManifest {
        class_names: a.classes.iter().map(|c| c.name().to_string()).collect(),
        entries,
    };
    let path = ds.save(&a.out)?;
    manifest.add(&path);
    manifest.finish(&a.out)?;
    Ok(ds)
}

pub fn pretrain(a: &PretrainArgs) -> Result<PathBuf> {
    let mut cfg = load_config(&a.config, a.seed)?;
    if let Some(m) = a.masking {
        cfg.masking = m;
    }
    cfg.validate()?;
    let ds = DatasetManifest::load(&a.data)?;
    let train = ds.read_split(&a.data, Some(Split::Train))?;
    let mut trainer = match &a.resume {
        Some(ck) => {
            require(ck)?;
            Trainer::resume(cfg.clone(), train, ck)?
        }
        None => Trainer::new(cfg.clone(), train)?,
    };
    let mut manifest = RunManifest::new("pretrain", cfg.seed).with_config(&a.config, &cfg);
    let summary = trainer.run(&a.out, a.stop_after, |_| {})?;
    manifest.add(&summary.metrics);
    for c in &summary.checkpoints {
        manifest.add(c);
    }
    let done = trainer.state.step;
    let last = a.out.join(checkpoint_name(done));
    if !last.exists() {
        trainer.save(&last)?;
    }
    if !summary.checkpoints.contains(&last) {
        manifest.add(&last);
    }
    manifest.finish(&a.out)?;
    Ok(last)
}

fn labeled(ds: &DatasetManifest, dir: &Path, split: Split) -> Result<(Vec<PointCloud>, Vec<usize>)> {
    let clouds = ds.read_split(dir, Some(split))?;
    let labels = clouds
        .iter()
        .map(|c| c.label.ok_or_else(|| Error::contract("manifest clouds carry labels")))
        .collect::<Result<_>>()?;
    Ok((clouds, labels))
}

/// Pretrained and random-init probe results, in that order.
pub fn probe(a: &ProbeArgs) -> Result<(ProbeResult, ProbeResult)> {
    let cfg = load_config(&a.config, None)?;
    require(&a.checkpoint)?;
    let ds = DatasetManifest::load(&a.data)?;
    let (train, ytr) = labeled(&ds, &a.data, Split::Train)?;
    let (test, yte) = labeled(&ds, &a.data, Split::Test)?;
    fs::create_dir_all(&a.out)?;
    let mut manifest = RunManifest::new("probe", cfg.seed).with_config(&a.config, &cfg);
    let pcfg = ProbeConfig::default();
    let mut results = Vec::new();
    let mut report = String::new();
    for (label, fx) in [
        ("pretrained", FeatureExtractor::from_checkpoint(&cfg, &a.checkpoint)?),
        ("random_init", FeatureExtractor::random_init(&cfg)),
    ] {
        let xtr = widen(&fx.extract(&train)?);
        let xte = widen(&fx.extract(&test)?);
        let r = linear_probe(&xtr, &ytr, &xte, &yte, a.seeds, &pcfg)?;
        report.push_str(&r.report(label));
        report.push('\n');
        let csv = a.out.join(format!("probe_{label}.csv"));
        fs::write(&csv, r.csv())?;
        manifest.add(&csv);
        println!("{label}: accuracy {:.4} +- {:.4}", r.accuracy_mean, r.accuracy_std);
        results.push(r);
    }
    let path = a.out.join("probe_report.toml");
    fs::write(&path, report)?;
    manifest.add(&path);
    manifest.finish(&a.out)?;
    let random = results.pop().expect("two results");
    Ok((results.pop().expect("two results"), random))
}

pub fn fewshot(a: &FewshotArgs) -> Result<crate::eval::FewShotResult> {
    let cfg = load_config(&a.config, None)?;
    require(&a.checkpoint)?;
    let ds = DatasetManifest::load(&a.data)?;
    let (clouds, labels) = labeled(&ds, &a.data, Split::Test)?;
    let fx = FeatureExtractor::from_checkpoint(&cfg, &a.checkpoint)?;
    let x = widen(&fx.extract(&clouds)?);
    let r = fewshot_eval(&x, &labels, a.way, a.shot, a.folds, a.query, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut manifest = RunManifest::new("fewshot", a.seed).with_config(&a.config, &cfg);
    let csv = a.out.join("fewshot.csv");
    fs::write(&csv, r.csv())?;
    let summary = a.out.join("fewshot_summary.toml");
    fs::write(
        &summary,
        format!(
            "way = {}\nshot = {}\nfolds = {}\naccuracy_mean = {:.6}\naccuracy_std = {:.6}\n",
            a.way, a.shot, a.folds, r.accuracy_mean, r.accuracy_std
        ),
    )?;
    manifest.add(&csv);
    manifest.add(&summary);
    manifest.finish(&a.out)?;
    println!("{}-way {}-shot: {:.4} +- {:.4}", a.way, a.shot, r.accuracy_mean, r.accuracy_std);
    Ok(r)
}

pub fn export(a: &ExportArgs) -> Result<Vec<PathBuf>> {
    let cfg = load_config(&a.config, None)?;
    require(&a.checkpoint)?;
    require(&a.cloud)?;
    let cloud = read_cloud(&a.cloud)?;
    let ex = MaskExporter::from_checkpoint(&cfg, &a.checkpoint)?;
    let stem = a
        .cloud
        .file_stem()
        .map_or_else(|| "cloud".to_string(), |s| s.to_string_lossy().into_owned());
    let paths = export_masks(&cloud, &ex, &a.out, &stem)?;
    let mut manifest = RunManifest::new("export-masks", cfg.seed).with_config(&a.config, &cfg);
    for p in &paths {
        manifest.add(p);
    }
    manifest.finish(&a.out)?;
    Ok(paths)
}

/// `(n, clouds per second)` for FPS to 64 centers plus 32-NN grouping.
pub fn bench(a: &BenchArgs) -> Result<Vec<(usize, f64)>> {
    let mut rows = Vec::new();
    let mut csv = String::from("n,clouds_per_sec\n");
    for n in [256usize, 1024, 2048] {
        let clouds = (0..a.clouds.max(1))
            .map(|i| gen_synthetic(ShapeClass::Sphere, n, 0.0, &mut stream_rng(a.seed, "bench", n as u64, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = stream_rng(a.seed, "bench_fps", n as u64, 0);
        let t0 = Instant::now();
        for c in &clouds {
            patchify(c, 64, 32, &mut rng)?;
        }
        let rate = clouds.len() as f64 / t0.elapsed().as_secs_f64().max(1e-9);
        csv.push_str(&format!("{n},{rate:.3}\n"));
        println!("n={n}: {rate:.1} clouds/s");
        rows.push((n, rate));
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        let path = out.join("bench.csv");
        fs::write(&path, csv)?;
        let mut manifest = RunManifest::new("bench", a.seed);
        manifest.add(&path);
        manifest.finish(out)?;
    }
    Ok(rows)
}
