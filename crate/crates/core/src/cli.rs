//! Command-line front end: `synth`, `augment`, `train`, `eval`, `gradcheck`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, RetrievalReport};
use crate::losses::{Reduction, TripletDistance};
use crate::model::{self, FcFormer};
use crate::numerics::{Checkpoint, GradCheckConfig};
use crate::oia::{self, AugmentConfig, Placement};
use crate::oil;
use crate::trainer::{self, TrainConfig, Trainer, CONFIG_META};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "FCF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "fcformer", version, about = "Occluded person re-identification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic re-identification dataset and occluder library.
    Synth(SynthArgs),
    /// Paste library occluders onto every image in a directory.
    Augment(AugmentArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Rank a gallery with a trained checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of the full model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub ids: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub imgs_per_id: usize,
    #[arg(long, default_value_t = 4)]
    pub cams: usize,
    /// Occluders per prior written to `<out>/library`.
    #[arg(long, default_value_t = 8)]
    pub library_size: usize,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Share one paste position across all images.
    #[arg(long)]
    pub fixed: bool,
    #[arg(long, default_value_t = oia::DEFAULT_DELTA_RANGE.0)]
    pub delta_lo: f32,
    #[arg(long, default_value_t = oia::DEFAULT_DELTA_RANGE.1)]
    pub delta_hi: f32,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key=value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for config echo, metrics and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Occluder manifest; a generated library is used when absent.
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Continue from a checkpoint written by `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Report path; defaults to `report.json` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Append holistic-stream part features to the descriptor.
    #[arg(long)]
    pub include_holistic: bool,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub per_param: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub tol: f32,
    /// Images per identity in the two-identity check batch.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
}

/// Flat `key=value` settings. Later assignments win.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

/// Every key [`RunConfig::apply`] understands.
pub const KEYS: &[&str] = &[
    "seed",
    "epochs",
    "lr",
    "p",
    "k",
    "momentum",
    "weight_decay",
    "warmup_frac",
    "pad",
    "library_size",
    "checkpoint_every",
    "grad_clip",
    "use_oia",
    "placement",
    "delta_lo",
    "delta_hi",
    "n_ids",
    "img_h",
    "img_w",
    "patch",
    "dim",
    "depth",
    "heads",
    "n_cameras",
    "lambda_cm",
    "m_parts",
    "use_fcd",
    "alpha",
    "dec_depth",
    "margin",
    "cht_distance",
    "cht_reduction",
    "fcd_weight",
];

fn parse<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("{key} = {v:?}: {e}"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key} = {v:?}: expected true or false")),
    }
}

fn set_key(cfg: &mut TrainConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let m = &mut cfg.model;
    match key {
        "seed" => cfg.seed = parse(key, v)?,
        "epochs" => cfg.epochs = parse(key, v)?,
        "lr" => cfg.base_lr = parse(key, v)?,
        "p" => cfg.pk.p = parse(key, v)?,
        "k" => cfg.pk.k = parse(key, v)?,
        "momentum" => cfg.momentum = parse(key, v)?,
        "weight_decay" => cfg.weight_decay = parse(key, v)?,
        "warmup_frac" => cfg.warmup_frac = parse(key, v)?,
        "pad" => cfg.pad = parse(key, v)?,
        "library_size" => cfg.library_size = parse(key, v)?,
        "checkpoint_every" => cfg.checkpoint_every = parse(key, v)?,
        "grad_clip" => {
            cfg.grad_clip = match v {
                "none" => None,
                _ => Some(parse(key, v)?),
            }
        }
        "use_oia" => cfg.use_oia = parse_bool(key, v)?,
        "placement" => {
            cfg.placement = match v {
                "random" => Placement::Random,
                "fixed" => Placement::Fixed,
                _ => return Err(format!("{key} = {v:?}: expected random or fixed")),
            }
        }
        "delta_lo" => cfg.delta_range.0 = parse(key, v)?,
        "delta_hi" => cfg.delta_range.1 = parse(key, v)?,
        "n_ids" => m.n_ids = parse(key, v)?,
        "img_h" => m.encoder.img_h = parse(key, v)?,
        "img_w" => m.encoder.img_w = parse(key, v)?,
        "patch" => m.encoder.patch = parse(key, v)?,
        "dim" => m.encoder.dim = parse(key, v)?,
        "depth" => m.encoder.depth = parse(key, v)?,
        "heads" => m.encoder.heads = parse(key, v)?,
        "n_cameras" => m.encoder.n_cameras = parse(key, v)?,
        "lambda_cm" => m.encoder.lambda_cm = parse(key, v)?,
        "m_parts" => m.encoder.m_parts = parse(key, v)?,
        "use_fcd" => m.use_fcd = parse_bool(key, v)?,
        "alpha" => m.fcd.alpha = parse(key, v)?,
        "dec_depth" => m.fcd.dec_depth = parse(key, v)?,
        "margin" => m.margin = parse(key, v)?,
        "fcd_weight" => m.fcd_weight = parse(key, v)?,
        "cht_distance" => {
            m.cht.distance = match v {
                "squared" => TripletDistance::Squared,
                "euclidean" => TripletDistance::Euclidean,
                _ => return Err(format!("{key} = {v:?}: expected squared or euclidean")),
            }
        }
        "cht_reduction" => {
            m.cht.reduction = match v {
                "sum" => Reduction::Sum,
                "mean" => Reduction::Mean,
                _ => return Err(format!("{key} = {v:?}: expected sum or mean")),
            }
        }
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

/// The effective configuration as `(key, value)` pairs in [`KEYS`] order.
pub fn flatten(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    let m = &cfg.model;
    let e = &m.encoder;
    let s = |v: &dyn ToString| v.to_string();
    let values = [
        s(&cfg.seed),
        s(&cfg.epochs),
        s(&cfg.base_lr),
        s(&cfg.pk.p),
        s(&cfg.pk.k),
        s(&cfg.momentum),
        s(&cfg.weight_decay),
        s(&cfg.warmup_frac),
        s(&cfg.pad),
        s(&cfg.library_size),
        s(&cfg.checkpoint_every),
        cfg.grad_clip.map_or("none".into(), |c| c.to_string()),
        s(&cfg.use_oia),
        match cfg.placement {
            Placement::Random => "random".into(),
            Placement::Fixed => "fixed".into(),
        },
        s(&cfg.delta_range.0),
        s(&cfg.delta_range.1),
        s(&m.n_ids),
        s(&e.img_h),
        s(&e.img_w),
        s(&e.patch),
        s(&e.dim),
        s(&e.depth),
        s(&e.heads),
        s(&e.n_cameras),
        s(&e.lambda_cm),
        s(&e.m_parts),
        s(&m.use_fcd),
        s(&m.fcd.alpha),
        s(&m.fcd.dec_depth),
        s(&m.margin),
        match m.cht.distance {
            TripletDistance::Squared => "squared".into(),
            TripletDistance::Euclidean => "euclidean".into(),
        },
        match m.cht.reduction {
            Reduction::Sum => "sum".into(),
            Reduction::Mean => "mean".into(),
        },
        s(&m.fcd_weight),
    ];
    KEYS.iter().copied().zip(values).collect()
}

/// `key=value` lines of the effective configuration.
pub fn echo(cfg: &TrainConfig) -> String {
    flatten(cfg).iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

impl RunConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut bad = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => cfg.set(k.trim(), v.trim()),
                _ => bad.push(format!("line {}: expected key=value, got {line:?}", n + 1)),
            }
        }
        if bad.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::load(path, e))
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Entries of `other` override ours.
    pub fn merge(&mut self, other: &RunConfig) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    /// Writes every entry into `cfg`, then validates it. All problems are
    /// reported together.
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        let mut problems: Vec<String> = self
            .entries
            .iter()
            .filter_map(|(k, v)| set_key(cfg, k, v).err())
            .collect();
        if problems.is_empty() {
            problems.extend(cfg.violations());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn overrides(args: &ConfigArgs) -> Result<RunConfig> {
    let mut rc = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut flags = RunConfig::default();
    let mut bad = Vec::new();
    for kv in &args.set {
        match kv.split_once('=') {
            Some((k, v)) => flags.set(k.trim(), v.trim()),
            None => bad.push(format!("--set {kv:?}: expected KEY=VALUE")),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Config(bad.join("; ")));
    }
    rc.merge(&flags);
    Ok(rc)
}

/// Worker count: the available parallelism, capped by `FCF_THREADS`.
pub fn thread_cap() -> Result<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(available),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(available)),
            _ => Err(Error::Config(format!("{THREADS_ENV} = {v:?} must be a positive integer"))),
        },
    }
}

/// Process exit code for a library error: input, path and configuration
/// problems are usage errors, everything else is a runtime failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Label { .. } | Error::Io { .. } | Error::Load { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if args.library_size == 0 {
        return Err(Error::Config("library_size must be positive".into()));
    }
    let ds = data::generate_dataset(args.seed, args.ids, args.imgs_per_id, args.cams)?;
    ds.save(&args.out)?;
    let manifest = oil::make_synthetic_library(args.seed, args.library_size).save(args.out.join("library"))?;
    println!(
        "wrote {} train, {} query, {} gallery images to {}; occluder manifest {}",
        ds.train.len(),
        ds.query.len(),
        ds.gallery.len(),
        args.out.display(),
        manifest.display()
    );
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::load(dir, "no png or jpeg images"));
    }
    Ok(files)
}

pub fn cmd_augment(args: &AugmentArgs) -> Result<()> {
    let lib = oil::load_library(&args.manifest)?;
    let files = image_files(&args.input)?;
    let batch = files
        .iter()
        .map(|p| Ok((image::open(p).map_err(|e| Error::load(p, e))?.to_rgb8(), 0, 0)))
        .collect::<Result<Vec<_>>>()?;
    let cfg = AugmentConfig {
        delta_range: (args.delta_lo, args.delta_hi),
        placement: if args.fixed { Placement::Fixed } else { Placement::Random },
    };
    let pairs = oia::augment_batch(&batch, &lib, &cfg, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for (path, pair) in files.iter().zip(&pairs) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let save = |suffix: &str, f: &dyn Fn(&Path) -> image::ImageResult<()>| -> Result<()> {
            let out = args.out.join(format!("{stem}_{suffix}.png"));
            f(&out).map_err(|e| Error::load(&out, e))
        };
        save("h", &|p| pair.holistic.save(p))?;
        save("o", &|p| pair.occluded.save(p))?;
        save("m", &|p| pair.occ_mask.save(p))?;
    }
    println!("augmented {} images into {}", pairs.len(), args.out.display());
    Ok(())
}

/// Training configuration for `data`: dataset-derived sizes, then the
/// config file, then flags.
pub fn train_config(data: &Dataset, rc: &RunConfig) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    cfg.model.n_ids = data.n_ids();
    cfg.model.encoder.n_cameras = data.config.n_cams;
    cfg.model.encoder.img_h = data.config.img_h as usize;
    cfg.model.encoder.img_w = data.config.img_w as usize;
    rc.apply(&mut cfg)?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let data = Dataset::load(&args.data)?;
    let mut rc = overrides(&args.config)?;
    if let Some(s) = args.seed {
        rc.set("seed", &s.to_string());
    }
    if let Some(e) = args.epochs {
        rc.set("epochs", &e.to_string());
    }
    if let Some(lr) = args.lr {
        rc.set("lr", &lr.to_string());
    }
    let cfg = train_config(&data, &rc)?;
    let lib = match &args.library {
        Some(m) => oil::load_library(m)?,
        None => oil::make_synthetic_library(cfg.seed, cfg.library_size),
    };
    let mut t = match &args.resume {
        Some(path) => {
            let t = Trainer::resume(&Checkpoint::load(path)?, &data, lib)?;
            if t.cfg != cfg {
                log::warn!("resuming with the configuration stored in {}", path.display());
            }
            t
        }
        None => Trainer::with_library(&cfg, &data, lib)?,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let echo_path = args.out.join("run_config.txt");
    std::fs::write(&echo_path, echo(&t.cfg)).map_err(|e| Error::io(&echo_path, e))?;
    t.fit(&data, Some(&args.out))?;
    let last = t.log.last().map(|r| r.loss.total).unwrap_or(f32::NAN);
    println!(
        "trained {} steps, final loss {last:.4}; checkpoint {}",
        t.step,
        trainer::checkpoint_path(&args.out).display()
    );
    Ok(())
}

/// Rebuilds an eval-mode model from a training checkpoint.
pub fn load_model(path: &Path) -> Result<FcFormer> {
    let ckpt = Checkpoint::load(path)?;
    let text = ckpt
        .meta
        .get(CONFIG_META)
        .ok_or_else(|| Error::load(path, "checkpoint has no training configuration"))?;
    let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::load(path, e))?;
    let mut model = FcFormer::new(&cfg.model, cfg.seed)?;
    ckpt.restore_into(&mut model.store)?;
    model.eval();
    Ok(model)
}

/// Occluded queries against the holistic gallery.
pub fn evaluate(model: &FcFormer, data: &Dataset, include_holistic: bool, batch_size: usize) -> Result<RetrievalReport> {
    let index = |split: &[data::Sample]| {
        let images: Vec<_> = split.iter().map(|s| &s.image).collect();
        let pids: Vec<_> = split.iter().map(|s| s.pid).collect();
        let cams: Vec<_> = split.iter().map(|s| s.cam).collect();
        eval::extract(model, &images, &pids, &cams, include_holistic, batch_size)
    };
    eval::cmc_map(&index(&data.query)?, &index(&data.gallery)?)
}

/// `Rank-1 Rank-5 Rank-10 mAP` header and one row of percentages.
pub fn format_report(r: &RetrievalReport) -> String {
    format!(
        "Rank-1 Rank-5 Rank-10 mAP\n{:.1} {:.1} {:.1} {:.1}\n",
        100.0 * r.rank(1),
        100.0 * r.rank(5),
        100.0 * r.rank(10),
        100.0 * r.map
    )
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let data = Dataset::load(&args.data)?;
    let report = evaluate(&model, &data, args.include_holistic, args.batch_size)?;
    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("report.json")
    });
    let text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    print!("{}", format_report(&report));
    if report.excluded_queries > 0 {
        println!("{} queries without a cross-camera match were excluded", report.excluded_queries);
    }
    Ok(())
}

/// Returns whether every sampled element passed.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let mut cfg = TrainConfig::default();
    overrides(&args.config)?.apply(&mut cfg)?;
    let gc = GradCheckConfig {
        tol: args.tol,
        per_param: args.per_param,
        seed: args.seed,
        threads: thread_cap()?,
        ..GradCheckConfig::default()
    };
    let start = std::time::Instant::now();
    let report = model::grad_check_model(&cfg.model, args.k, &gc)?;
    println!(
        "checked {} elements over {} parameters in {:.1?} on {} threads; max relative error {:.2e} ({})",
        report.elements_checked,
        report.params_checked,
        start.elapsed(),
        gc.threads,
        report.max_rel_err,
        report.worst_param.as_deref().unwrap_or("-")
    );
    for name in report.failing_params() {
        println!("FAILED {name}");
    }
    Ok(report.passed())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = thread_cap().and_then(|_| {
        match &cli.command {
            Command::Synth(a) => cmd_synth(a).map(|_| true),
            Command::Augment(a) => cmd_augment(a).map(|_| true),
            Command::Train(a) => cmd_train(a).map(|_| true),
            Command::Eval(a) => cmd_eval(a).map(|_| true),
            Command::Gradcheck(a) => cmd_gradcheck(a),
        }
    });
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
