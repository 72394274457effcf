//! `difflab` command-line runner.
//!
//! Exit codes: 0 success, 2 configuration or flag error, 3 data or input
//! error, 4 numerical failure, 5 checkpoint incompatible with the request.

mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use difflab::data::{decode_pgm, DataError, Dataset};
use difflab::denoiser::{DenoiserModel, NoisePredictor};
use difflab::metrics::{
    discrete_kl, fid_from_features, inception_score, psnr, ssim, write_reports_csv, ClassifierArch, ClassifierTrainConfig,
    FeatureModel, MetricReport, MetricsError, MlpClassifier, SSIM_C1, SSIM_C2,
};
use difflab::numerics::Tensor;
use difflab::sampler::{sample, samples_to_pgm_grid, write_samples_csv, SampleRequest, SamplerError, SamplerVariant};
use difflab::schedule::{cosine_schedule, linear_schedule, stride_steps, DEFAULT_COSINE_OFFSET};
use difflab::training::{train, write_loss_csv, Checkpoint, CheckpointError, ModelMeta, TrainError};
use serde_json::json;
use sha2::{Digest, Sha256};

use config::{RunConfig, Task};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }

    fn data(message: impl Into<String>) -> Self {
        Self::new(3, message)
    }

    fn numeric(message: impl Into<String>) -> Self {
        Self::new(4, message)
    }

    fn incompatible(message: impl Into<String>) -> Self {
        Self::new(5, message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Numerics(_) => Self::numeric(msg),
            TrainError::Data(_) | TrainError::Forward(_) => Self::data(msg),
            _ => Self::config(msg),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        let msg = e.to_string();
        match e {
            SamplerError::HeadMismatch(_) | SamplerError::ConditioningMismatch(_) => Self::incompatible(msg),
            SamplerError::Denoiser(_) | SamplerError::Numerics(_) => Self::numeric(msg),
            _ => Self::config(msg),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let msg = e.to_string();
        match e {
            CheckpointError::WrongKind { .. } => Self::incompatible(msg),
            _ => Self::data(msg),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let msg = e.to_string();
        match e {
            MetricsError::Data(_) => Self::data(msg),
            MetricsError::Numerics(_) => Self::numeric(msg),
            _ => Self::config(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "difflab", version, about = "Train, sample and evaluate desk-scale diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser or feature classifier from a TOML config.
    Train(TrainArgs),
    /// Draw samples from a denoiser checkpoint.
    Sample(SampleArgs),
    /// Compute evaluation metrics between generated and reference data.
    Eval(EvalArgs),
    /// Dump a noise schedule as CSV.
    Schedule(ScheduleArgs),
    /// Describe a checkpoint.
    Info(InfoArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// TOML run configuration
    config: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of SGD steps
    #[arg(long)]
    steps: Option<usize>,
    /// Override the output directory
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
enum VariantFlag {
    Ddpm,
    Improved,
    Ddim,
    Guided,
}

#[derive(clap::Args)]
struct SampleArgs {
    /// Denoiser checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "ddpm")]
    variant: VariantFlag,
    /// Number of strided steps for improved and ddim (defaults to T)
    #[arg(long)]
    k: Option<usize>,
    /// DDIM stochasticity in [0, 1]
    #[arg(long)]
    eta: Option<f64>,
    /// Guidance weight, w >= 0
    #[arg(long)]
    w: Option<f64>,
    /// Class to condition on
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; `.pgm` writes an image grid, anything else CSV
    #[arg(long)]
    output: PathBuf,
    /// Image height for PGM output
    #[arg(long)]
    height: Option<usize>,
    /// Image width for PGM output
    #[arg(long)]
    width: Option<usize>,
    /// Images per row of the PGM grid
    #[arg(long, default_value_t = 8)]
    columns: usize,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Generated samples: CSV file, PGM file or directory of PGM files
    #[arg(long)]
    gen: PathBuf,
    /// Reference samples in the same formats
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Comma-separated metrics: fid, is, psnr, ssim, kl
    #[arg(long, value_delimiter = ',', required = true)]
    metrics: Vec<MetricFlag>,
    /// Classifier checkpoint supplying probabilities and features
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Use raw coordinates as FID features when no classifier is given
    #[arg(long)]
    raw_features: bool,
    /// Inception-score batches
    #[arg(long, default_value_t = 10)]
    batches: usize,
    /// SSIM patch size
    #[arg(long, default_value_t = 4)]
    window: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MetricFlag {
    Fid,
    Is,
    Psnr,
    Ssim,
    Kl,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleType {
    Linear,
    Cosine,
}

#[derive(clap::Args)]
struct ScheduleArgs {
    #[arg(long = "type", value_enum)]
    kind: ScheduleType,
    /// Step count T
    #[arg(long)]
    t: usize,
    /// Cosine offset
    #[arg(long, default_value_t = DEFAULT_COSINE_OFFSET)]
    s: f64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(clap::Args)]
struct InfoArgs {
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::Info(a) => cmd_info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(sha256_hex(bytes))
}

fn manifest_path(output: &Path) -> PathBuf {
    output.with_extension("manifest.json")
}

fn write_manifest(path: &Path, value: serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(&value).expect("json value");
    text.push('\n');
    write_file(path, text.as_bytes()).map(|_| ())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    if let Some(output) = args.output {
        cfg.output = output;
    }
    cfg.validate()?;
    let ckpt_path = cfg.output.join("model.ckpt");
    let loss_path = cfg.output.join("loss.csv");
    let (ckpt, losses) = match cfg.task {
        Task::Denoiser => train_denoiser(&cfg)?,
        Task::Classifier => train_classifier(&cfg)?,
    };
    let ckpt_hash = write_file(&ckpt_path, &ckpt.encode()?)?;
    let mut loss_csv = Vec::new();
    write_loss_csv(&losses, &mut loss_csv).map_err(|e| CliError::data(e.to_string()))?;
    let loss_hash = write_file(&loss_path, &loss_csv)?;
    write_manifest(
        &cfg.output.join("manifest.json"),
        json!({
            "command": "train",
            "config": cfg,
            "checkpoint": { "path": "model.ckpt", "sha256": ckpt_hash },
            "loss_log": { "path": "loss.csv", "sha256": loss_hash },
        }),
    )?;
    println!("# wrote {} (sha256 {ckpt_hash})", ckpt_path.display());
    Ok(())
}

fn train_denoiser(cfg: &RunConfig) -> Result<(Checkpoint, Vec<f64>), CliError> {
    let spec = cfg.schedule.expect("validated");
    let sched = spec.build().map_err(|e| CliError::config(e.to_string()))?;
    let mut source = cfg.data.source()?;
    let arch = cfg.arch(source.dim(), source.num_classes())?;
    let model = DenoiserModel::new(arch, cfg.seed).map_err(|e| CliError::config(e.to_string()))?;
    println!("# training {} parameters for {} steps", model.num_params(), cfg.train.steps);
    let out = train(model, source.as_mut(), &sched, &cfg.train_config(), cfg.train.variant)?;
    report_losses(&out.losses);
    Ok((Checkpoint::from_denoiser(&out.model, spec, cfg.train.steps as u64, out.rng), out.losses))
}

fn train_classifier(cfg: &RunConfig) -> Result<(Checkpoint, Vec<f64>), CliError> {
    let ds = cfg.data.dataset(cfg.train.samples.unwrap_or(10_000), cfg.seed)?;
    let num_classes = ds.num_classes().ok_or_else(|| CliError::data("classifier training data has no labels"))?;
    let arch = ClassifierArch { input_dim: ds.dim(), hidden: cfg.model.hidden.clone(), num_classes };
    let clf = MlpClassifier::new(arch, cfg.seed)?;
    println!("# training classifier with {} parameters for {} steps", clf.num_params(), cfg.train.steps);
    let tc = ClassifierTrainConfig { gamma: cfg.train.gamma, batch: cfg.train.batch, steps: cfg.train.steps, seed: cfg.seed };
    let (clf, losses, rng) = clf.train(&ds, &tc)?;
    report_losses(&losses);
    let labels = ds.labels().expect("labeled");
    println!("# training accuracy {:.4}", clf.accuracy(&ds.to_matrix(), labels)?);
    Ok((Checkpoint::from_classifier(&clf, cfg.train.steps as u64, vec![rng]), losses))
}

fn report_losses(losses: &[f64]) {
    let tail = &losses[losses.len().saturating_sub(500)..];
    if !tail.is_empty() {
        println!("# mean loss over the last {} steps {:.6}", tail.len(), tail.iter().sum::<f64>() / tail.len() as f64);
    }
}

fn sampler_variant(args: &SampleArgs, steps: usize) -> Result<SamplerVariant, CliError> {
    let only = |flag: &str, set: bool, variant: &str| {
        if set {
            Err(CliError::config(format!("--{flag} applies only to --variant {variant}")))
        } else {
            Ok(())
        }
    };
    let (is_ddim, is_guided) = (matches!(args.variant, VariantFlag::Ddim), matches!(args.variant, VariantFlag::Guided));
    only("eta", args.eta.is_some() && !is_ddim, "ddim")?;
    only("w", args.w.is_some() && !is_guided, "guided")?;
    only("k", args.k.is_some() && !matches!(args.variant, VariantFlag::Improved | VariantFlag::Ddim), "improved or ddim")?;
    let k = args.k.unwrap_or(steps);
    let check_k = || stride_steps(steps, k).map(|_| k).map_err(|e| CliError::config(format!("--k: {e}")));
    Ok(match args.variant {
        VariantFlag::Ddpm => SamplerVariant::Ddpm,
        VariantFlag::Improved => SamplerVariant::Improved { k: check_k()? },
        VariantFlag::Ddim => SamplerVariant::Ddim { k: check_k()?, eta: args.eta.unwrap_or(0.0) },
        VariantFlag::Guided => SamplerVariant::Guided {
            w: args.w.ok_or_else(|| CliError::config("--variant guided needs --w"))?,
        },
    })
}

fn cmd_sample(args: SampleArgs) -> Result<(), CliError> {
    if args.count == 0 {
        return Err(CliError::config("--count must be positive"));
    }
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let (model, spec) = ckpt.to_denoiser()?;
    let sched = spec.build().map_err(|e| CliError::data(e.to_string()))?;
    let variant = sampler_variant(&args, sched.steps())?;
    match (args.class, model.num_classes()) {
        (Some(c), Some(n)) if c >= n => return Err(CliError::config(format!("--class {c} out of range for {n} classes"))),
        (Some(_), None) => return Err(CliError::incompatible("--class given but the checkpoint is not class-conditioned")),
        _ => {}
    }
    let req = SampleRequest::new(args.count, args.seed, variant.clone()).with_class(args.class);
    println!("# sampling {} points with {:?}", args.count, variant);
    let out = sample(&model, &sched, &req)?;
    if !out.samples.is_finite() {
        return Err(CliError::numeric("sampling produced non-finite values"));
    }
    let is_pgm = args.output.extension().is_some_and(|e| e == "pgm");
    let bytes = if is_pgm {
        let d = model.dim();
        let (h, w) = match (args.height, args.width) {
            (Some(h), Some(w)) => (h, w),
            (None, None) => (1, d),
            _ => return Err(CliError::config("--height and --width go together")),
        };
        samples_to_pgm_grid(&out.samples, h, w, args.columns)?
    } else {
        let mut buf = Vec::new();
        write_samples_csv(&out.samples, &mut buf).map_err(|e| CliError::data(e.to_string()))?;
        buf
    };
    let hash = write_file(&args.output, &bytes)?;
    write_manifest(
        &manifest_path(&args.output),
        json!({
            "command": "sample",
            "checkpoint": { "path": args.checkpoint, "sha256": sha256_hex(&fs::read(&args.checkpoint)?) },
            "variant": args.variant,
            "k": match variant { SamplerVariant::Improved { k } | SamplerVariant::Ddim { k, .. } => Some(k), _ => None },
            "eta": match variant { SamplerVariant::Ddim { eta, .. } => Some(eta), _ => None },
            "w": match variant { SamplerVariant::Guided { w } => Some(w), _ => None },
            "class": args.class,
            "count": args.count,
            "seed": args.seed,
            "format": if is_pgm { "pgm" } else { "csv" },
            "output": { "path": args.output, "sha256": hash },
        }),
    )?;
    println!("# wrote {} (sha256 {hash})", args.output.display());
    Ok(())
}

/// Samples as rows, with the image shape when read from PGM files.
struct Inputs {
    x: Tensor,
    shape: Option<(usize, usize)>,
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>), CliError> {
    decode_pgm(&fs::read(path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_inputs(path: &Path) -> Result<Inputs, CliError> {
    let unreadable = |e: &dyn std::fmt::Display| CliError::data(format!("{}: {e}", path.display()));
    let images: Vec<PathBuf> = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| unreadable(&e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::data(format!("{} holds no .pgm files", path.display())));
        }
        files
    } else if path.extension().is_some_and(|e| e == "pgm") {
        vec![path.to_path_buf()]
    } else {
        let file = fs::File::open(path).map_err(|e| unreadable(&e))?;
        let ds = Dataset::read_csv("input", file).map_err(|e| unreadable(&e))?;
        return Ok(Inputs { x: ds.to_matrix(), shape: None });
    };
    let mut data = Vec::new();
    let mut shape = None;
    for p in &images {
        let (w, h, v) = read_pgm(p)?;
        if *shape.get_or_insert((h, w)) != (h, w) {
            return Err(CliError::data(format!("{} is {h}x{w}, expected {:?}", p.display(), shape.unwrap())));
        }
        data.extend(v);
    }
    let (h, w) = shape.expect("at least one image");
    let x = Tensor::matrix(images.len(), h * w, data).map_err(|e| CliError::data(e.to_string()))?;
    Ok(Inputs { x, shape: Some((h, w)) })
}

/// Identity feature map for low-dimensional data.
struct RawFeatures(usize);

impl FeatureModel for RawFeatures {
    fn num_classes(&self) -> usize {
        0
    }

    fn feature_dim(&self) -> usize {
        self.0
    }

    fn probabilities(&self, _x: &Tensor) -> Result<Tensor, MetricsError> {
        Err(MetricsError::InvalidClassifier("raw features carry no class probabilities".into()))
    }

    fn features(&self, x: &Tensor) -> Result<Tensor, MetricsError> {
        Ok(x.clone())
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let gen = read_inputs(&args.gen)?;
    let reference = read_inputs(&args.reference)?;
    let classifier = match &args.classifier {
        Some(p) => Some(read_checkpoint(p)?.to_classifier()?),
        None => None,
    };
    let (k, m) = (gen.x.rows(), reference.x.rows());
    let mut reports = Vec::new();
    for metric in &args.metrics {
        let report = match metric {
            MetricFlag::Fid => {
                let raw = RawFeatures(gen.x.cols());
                let fm: &dyn FeatureModel = match (&classifier, args.raw_features) {
                    (Some(c), _) => c,
                    (None, true) => &raw,
                    (None, false) => return Err(CliError::config("fid needs --classifier or --raw-features")),
                };
                let value = fid_from_features(&fm.features(&gen.x)?, &fm.features(&reference.x)?)?;
                MetricReport::single("fid", value, k, m)
            }
            MetricFlag::Is => {
                let c = classifier.as_ref().ok_or_else(|| CliError::config("is needs --classifier"))?;
                inception_score(&gen.x, c, args.batches)?
            }
            MetricFlag::Psnr => MetricReport::single("psnr", psnr(&gen.x, &reference.x)?, k, m),
            MetricFlag::Ssim => {
                let (h, w) = gen.shape.ok_or_else(|| CliError::config("ssim needs PGM image inputs"))?;
                if reference.shape != gen.shape || k != m {
                    return Err(CliError::config("ssim needs equally many images of one shape on both sides"));
                }
                let mut total = 0.0;
                for i in 0..k {
                    let a = Tensor::matrix(h, w, gen.x.row(i).to_vec()).expect("image shape");
                    let b = Tensor::matrix(h, w, reference.x.row(i).to_vec()).expect("image shape");
                    total += ssim(&a, &b, args.window, SSIM_C1, SSIM_C2)?;
                }
                MetricReport::single("ssim", total / k as f64, k, m)
            }
            MetricFlag::Kl => MetricReport::single("kl", discrete_kl(gen.x.data(), reference.x.data())?, k, m),
        };
        println!("# {} = {}", report.metric, report.value);
        reports.push(report);
    }
    let mut buf = Vec::new();
    write_reports_csv(&reports, &mut buf).map_err(|e| CliError::data(e.to_string()))?;
    write_file(&args.output, &buf)?;
    Ok(())
}

fn cmd_schedule(args: ScheduleArgs) -> Result<(), CliError> {
    let sched = match args.kind {
        ScheduleType::Linear => linear_schedule(args.t),
        ScheduleType::Cosine => cosine_schedule(args.t, args.s),
    }
    .map_err(|e| CliError::config(e.to_string()))?;
    let mut buf = Vec::new();
    sched.write_csv(&mut buf).map_err(|e| CliError::data(e.to_string()))?;
    write_file(&args.output, &buf)?;
    println!("# wrote {} rows to {}", sched.steps(), args.output.display());
    Ok(())
}

fn cmd_info(args: InfoArgs) -> Result<(), CliError> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let out = std::io::stdout();
    let mut out = BufWriter::new(out.lock());
    let meta = &ckpt.meta;
    let line = |out: &mut BufWriter<_>, key: &str, value: String| writeln!(out, "# {key}: {value}");
    let result = (|| {
        match &meta.model {
            ModelMeta::Denoiser { arch, schedule } => {
                line(&mut out, "kind", "denoiser".into())?;
                line(&mut out, "arch", serde_json::to_string(arch).expect("json"))?;
                line(&mut out, "schedule", serde_json::to_string(schedule).expect("json"))?;
            }
            ModelMeta::Classifier { arch } => {
                line(&mut out, "kind", "classifier".into())?;
                line(&mut out, "arch", serde_json::to_string(arch).expect("json"))?;
            }
        }
        line(&mut out, "step", meta.step.to_string())?;
        line(&mut out, "params", meta.n_params.to_string())?;
        line(&mut out, "rng", serde_json::to_string(&meta.rng).expect("json"))?;
        out.flush()
    })();
    result.map_err(CliError::from)
}
