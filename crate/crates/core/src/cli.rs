//! Command-line front end: dataset synthesis, training, evaluation,
//! ablation, Hampel filtering and the gradient self-check.
//!
//! Settings resolve as built-in defaults (or a named preset), then a JSON
//! config file deep-merged on top, then command-line flags. The resolved
//! configuration is echoed to `<out>/run_config.json`.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{self, canonical_json, DataError, Dataset, SplitName, SplitRatios, SyntheticSpec};
use crate::eval::{ablation_study_with, evaluate, report_timestamp, EvalError};
use crate::layers::AttentionKernel;
use crate::model::{ModelConfig, ModelError, Streams, TransFusionModel};
use crate::preprocess::{hampel_columns, hampel_filter, PreprocessError, SigmaMode};
use crate::selfcheck::gradient_suite;
use crate::tensor::{read_tensor, write_tensor, DType, FormatError, Tensor, TensorError};
use crate::train::{
    epoch_log_csv, fit_with, load_checkpoint, save_checkpoint, TrainConfig, TrainError, EPOCH_LOG_HEADER,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_CHECK: i32 = 5;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  invalid configuration or arguments
  3  I/O or file-format error
  4  numerical failure (non-finite loss, gradient or activation)
  5  check failure (gradcheck tolerance exceeded)";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
    Check(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Check(_) => EXIT_CHECK,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numeric(m) | CliError::Check(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Numeric { .. } | TensorError::NonDeterministic { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numeric { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_)
            | DataError::Split(_)
            | DataError::NoSplit
            | DataError::Preprocess(_)
            | DataError::Tensor(_) => CliError::Config(e.to_string()),
            DataError::Empty
            | DataError::Version { .. }
            | DataError::MissingFile(_)
            | DataError::Format { .. }
            | DataError::LabelMismatch { .. }
            | DataError::Manifest(_)
            | DataError::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } | TrainError::Forward { .. } => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Config(_) | TrainError::GradientShape { .. } => CliError::Config(e.to_string()),
            TrainError::Checkpoint(_) | TrainError::Io(_) => CliError::Io(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Tensor(t) => t.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Data(d) => d.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
}

/// Everything a command needs, fully resolved before it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub split: SplitConfig,
    pub precision: Precision,
    pub paths: Paths,
    pub eval_split: SplitName,
    pub gradcheck_seeds: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SyntheticSpec::default(),
            split: SplitConfig {
                ratios: SplitRatios::default(),
                seed: 0,
            },
            precision: Precision::F64,
            paths: Paths {
                out: PathBuf::from("out"),
                data: None,
                checkpoint: None,
                input: None,
            },
            eval_split: SplitName::Test,
            gradcheck_seeds: 5,
        }
    }
}

impl RunConfig {
    /// Named starting points for `--config`: `default` and `tiny`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "tiny" => Some(Self {
                model: ModelConfig::tiny(),
                data: SyntheticSpec::tiny(),
                ..Self::default()
            }),
            _ => None,
        }
    }

    /// Sets the dataset, split, model and training seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.split.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.precision == Precision::F32 {
            return Err(CliError::Config(
                "precision f32 is not supported: all computation and storage is 64-bit (use --precision f64)".into(),
            ));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        Ok(())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Starting configuration from `--config`: a preset name or a JSON file
/// merged over the defaults. A file named like a preset wins.
pub fn load_config(spec: Option<&str>) -> Result<RunConfig, CliError> {
    let Some(spec) = spec else {
        return Ok(RunConfig::default());
    };
    let path = Path::new(spec);
    if !path.exists() {
        return RunConfig::preset(spec).ok_or_else(|| {
            CliError::Config(format!(
                "--config {spec:?} is neither a file nor a preset (default, tiny)"
            ))
        });
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let patch: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut base = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    merge(&mut base, patch);
    serde_json::from_value(base).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Parser, Debug)]
#[command(
    name = "transfusion",
    version,
    about = "Cross-modal WiFi CSI + camera crowd counting: synthesis, training, evaluation",
    after_help = EXIT_HELP
)]
pub struct Cli {
    /// JSON config file merged over the defaults, or a preset name (default, tiny).
    #[arg(long, global = true, value_name = "PATH|PRESET")]
    pub config: Option<String>,
    /// Seed for data generation, splitting, initialization and batching.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Numeric precision; only f64 is supported.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired CSI/image dataset with an 8:1:1 split.
    Synth(SynthArgs),
    /// Train a model and keep the best-on-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train the full model and the four ablations; report test metrics.
    Ablate(AblateArgs),
    /// Hampel-filter a TFTN series ([n] or [n, d], columns independently).
    Hampel(HampelArgs),
    /// Finite-difference check of every op, layer and the end-to-end model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Largest crowd count (counts run from 0).
    #[arg(long)]
    pub counts: Option<u32>,
    /// Samples per count.
    #[arg(long)]
    pub per_count: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StreamsArg {
    Both,
    WifiOnly,
    VisionOnly,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum KernelArg {
    Linear,
    Softmax,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub streams: Option<StreamsArg>,
    #[arg(long, value_enum)]
    pub attention: Option<KernelArg>,
    /// Drop the multi-scale convolution sub-layer.
    #[arg(long)]
    pub no_multiscale: bool,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = ["train", "val", "test"])]
    pub split: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Print canonical JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SigmaArg {
    Mad,
    SampleStd,
}

#[derive(Args, Debug)]
pub struct HampelArgs {
    /// TFTN file holding a [n] or [n, d] series.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub half_width: Option<usize>,
    #[arg(long)]
    pub n_sigmas: Option<f64>,
    #[arg(long, value_enum)]
    pub sigma: Option<SigmaArg>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Number of random seeds (starting at --seed, default 0).
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub json: bool,
}

impl ModelArgs {
    fn apply(&self, m: &mut ModelConfig) {
        if let Some(s) = self.streams {
            m.streams = match s {
                StreamsArg::Both => Streams::Both,
                StreamsArg::WifiOnly => Streams::WifiOnly,
                StreamsArg::VisionOnly => Streams::VisionOnly,
            };
        }
        if let Some(k) = self.attention {
            m.attention_kernel = match k {
                KernelArg::Linear => AttentionKernel::Linear,
                KernelArg::Softmax => AttentionKernel::Softmax,
            };
        }
        if self.no_multiscale {
            m.use_multiscale = false;
        }
        set(&mut m.d_model, self.d_model);
        set(&mut m.n_heads, self.heads);
        set(&mut m.n_layers, self.layers);
        set(&mut m.d_ff, self.d_ff);
    }
}

impl FitArgs {
    fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.max_epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.lr, self.lr);
        if self.patience.is_some() {
            t.early_stop_patience = self.patience;
        }
        if self.grad_clip.is_some() {
            t.grad_clip = self.grad_clip;
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Applies presets, the config file and flags in precedence order.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    set(&mut cfg.precision, cli.precision);
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    match &cli.command {
        Command::Synth(a) => {
            set(&mut cfg.data.n_counts, a.counts);
            set(&mut cfg.data.samples_per_count, a.per_count);
            set(&mut cfg.data.noise_std, a.noise_std);
        }
        Command::Train(a) => {
            if a.data.is_some() {
                cfg.paths.data = a.data.clone();
            }
            a.model.apply(&mut cfg.model);
            a.fit.apply(&mut cfg.train);
        }
        Command::Eval(a) => {
            if a.data.is_some() {
                cfg.paths.data = a.data.clone();
            }
            if a.checkpoint.is_some() {
                cfg.paths.checkpoint = a.checkpoint.clone();
            }
            if let Some(s) = &a.split {
                cfg.eval_split = s.parse()?;
            }
            set(&mut cfg.train.batch_size, a.batch_size);
        }
        Command::Ablate(a) => {
            if a.data.is_some() {
                cfg.paths.data = a.data.clone();
            }
            a.model.apply(&mut cfg.model);
            a.fit.apply(&mut cfg.train);
        }
        Command::Hampel(a) => {
            if a.input.is_some() {
                cfg.paths.input = a.input.clone();
            }
            set(&mut cfg.data.hampel.half_width, a.half_width);
            set(&mut cfg.data.hampel.n_sigmas, a.n_sigmas);
            if let Some(s) = a.sigma {
                cfg.data.hampel.mode = match s {
                    SigmaArg::Mad => SigmaMode::Mad,
                    SigmaArg::SampleStd => SigmaMode::SampleStd,
                };
            }
        }
        Command::Gradcheck(a) => set(&mut cfg.gradcheck_seeds, a.seeds),
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_echo(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.paths.out)?;
    fs::write(cfg.paths.out.join("run_config.json"), canonical_json(cfg))?;
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("{flag} is required")))
}

/// Loads a dataset, splitting it with the configured seed if the manifest
/// carries no assignment, and aligns the model input sizes with it.
fn load_dataset(cfg: &mut RunConfig) -> Result<Dataset, CliError> {
    let dir = required(&cfg.paths.data, "--data")?.to_path_buf();
    let mut ds = data::load(&dir)?;
    if ds.split.is_none() {
        let a = data::split(&ds, cfg.split.ratios, cfg.split.seed)?;
        ds = ds.with_split(a)?;
    }
    cfg.model.l_w = ds.spec.l_w;
    cfg.model.d_w = ds.spec.d_w;
    cfg.model.l_v = ds.spec.l_v();
    cfg.model.d_v = ds.spec.d_v();
    cfg.data = ds.spec.clone();
    Ok(ds)
}

fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = data::generate(&cfg.data)?;
    let a = data::split(&ds, cfg.split.ratios, cfg.split.seed)?;
    let ds = ds.with_split(a)?;
    data::save(&ds, &cfg.paths.out)?;
    write_echo(cfg)?;
    let split = ds.split_assignment()?;
    println!(
        "wrote {} samples (counts 0..={}, {} each) to {}",
        ds.len(),
        cfg.data.n_counts,
        cfg.data.samples_per_count,
        cfg.paths.out.display()
    );
    println!(
        "split train/val/test: {}/{}/{}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    println!("dataset id: {}", ds.dataset_id());
    Ok(())
}

fn cmd_train(mut cfg: RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(&mut cfg)?;
    cfg.validate()?;
    write_echo(&cfg)?;
    let out = cfg.paths.out.clone();
    let ckpt = out.join("best.tfck");
    let train = ds.subset(SplitName::Train)?;
    let val = ds.subset(SplitName::Val)?;
    let model = TransFusionModel::build(&cfg.model)?;
    println!("model: {} parameters", model.num_parameters());

    let mut log = File::create(out.join("epoch_log.csv"))?;
    writeln!(log, "{EPOCH_LOG_HEADER}")?;
    let outcome = fit_with(model, &train, &val, &cfg.train, |ev| {
        let r = ev.record;
        if r.is_best {
            save_checkpoint(ev.model, Some(ev.adam), &ckpt)?;
        }
        let line = epoch_log_csv(std::slice::from_ref(r));
        log.write_all(line.lines().nth(1).unwrap_or_default().as_bytes())?;
        log.write_all(b"\n")?;
        log.flush()?;
        println!(
            "epoch {:>4}  train_l1 {:.4}  val_mae {:.4}  val_mse {:.4}{}",
            r.epoch,
            r.train_l1,
            r.val_mae,
            r.val_mse,
            if r.is_best { "  *" } else { "" }
        );
        Ok(())
    })?;
    let test = ds.subset(SplitName::Test)?;
    let mut report = evaluate(&outcome.best, &test, cfg.train.batch_size)?;
    report.dataset_id = Some(ds.dataset_id());
    report.timestamp = report_timestamp();
    fs::write(out.join("test_metrics.json"), report.json())?;
    println!(
        "best epoch {} (val MAE {:.4}); checkpoint {}",
        outcome.state.best_epoch.unwrap_or(0),
        outcome.state.best_val_mae,
        ckpt.display()
    );
    print!("test metrics:\n{}", report.table());
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, json: bool) -> Result<(), CliError> {
    let path = required(&cfg.paths.checkpoint, "--checkpoint")?.to_path_buf();
    let (model, _) = load_checkpoint(&path)?;
    let ds = load_dataset(&mut cfg)?;
    cfg.model = model.config().clone();
    write_echo(&cfg)?;
    let subset = ds.subset(cfg.eval_split)?;
    let mut report = evaluate(&model, &subset, cfg.train.batch_size)?;
    report.dataset_id = Some(ds.dataset_id());
    report.timestamp = report_timestamp();
    fs::write(cfg.paths.out.join("metrics.json"), report.json())?;
    fs::write(cfg.paths.out.join("metrics.csv"), report.csv())?;
    if json {
        println!("{}", report.json());
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

fn cmd_ablate(mut cfg: RunConfig, json: bool) -> Result<(), CliError> {
    let ds = load_dataset(&mut cfg)?;
    cfg.validate()?;
    write_echo(&cfg)?;
    let report = ablation_study_with(&cfg.model, &ds, &cfg.train, |variant, res| match res {
        Ok(m) => eprintln!("{:<18} test MAE {:.4}", variant.label(), m.mae),
        Err(e) => eprintln!("{:<18} failed: {e}", variant.label()),
    })?;
    let out = &cfg.paths.out;
    fs::write(out.join("ablation.csv"), report.csv())?;
    fs::write(out.join("ablation.json"), report.json())?;
    fs::write(out.join("ablation.txt"), report.table())?;
    if json {
        println!("{}", report.json());
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

#[derive(Serialize)]
struct HampelSummary {
    input: PathBuf,
    shape: Vec<usize>,
    outliers: usize,
    filtered: PathBuf,
    mask: PathBuf,
}

fn cmd_hampel(cfg: &RunConfig, json: bool) -> Result<(), CliError> {
    let input = required(&cfg.paths.input, "--input")?;
    let x = read_tensor(input)?;
    let (filtered, mask) = match x.rank() {
        1 => {
            let r = hampel_filter(x.data(), &cfg.data.hampel)?;
            (Tensor::new(x.shape(), r.filtered)?, r.mask)
        }
        2 => hampel_columns(&x, &cfg.data.hampel)?,
        r => {
            return Err(CliError::Config(format!(
                "expected a [n] or [n, d] series, got rank {r}"
            )))
        }
    };
    write_echo(cfg)?;
    let out = &cfg.paths.out;
    let (fpath, mpath) = (out.join("hampel_filtered.tftn"), out.join("hampel_mask.tftn"));
    write_tensor(&fpath, &filtered, DType::F64)?;
    let mask_t = Tensor::new(x.shape(), mask.iter().map(|&m| f64::from(u8::from(m))).collect())?;
    write_tensor(&mpath, &mask_t, DType::F64)?;
    let summary = HampelSummary {
        input: input.to_path_buf(),
        shape: x.shape().to_vec(),
        outliers: mask.iter().filter(|&&m| m).count(),
        filtered: fpath,
        mask: mpath,
    };
    if json {
        println!("{}", canonical_json(&summary));
    } else {
        println!(
            "{} of {} samples replaced; filtered series in {}",
            summary.outliers,
            x.numel(),
            summary.filtered.display()
        );
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, start: u64, json: bool) -> Result<(), CliError> {
    write_echo(cfg)?;
    let results = gradient_suite(start..start + cfg.gradcheck_seeds)?;
    fs::write(cfg.paths.out.join("gradcheck.json"), canonical_json(&results))?;
    let failed: Vec<_> = results.iter().filter(|r| !r.pass).collect();
    if json {
        println!("{}", canonical_json(&results));
    } else {
        for r in &results {
            println!(
                "{} {:<22} seed {:>3}  max_rel_err {:.3e} (tol {:.0e}, {} checked, {} at kinks)",
                if r.pass { "PASS" } else { "FAIL" },
                r.name,
                r.seed,
                r.max_rel_err,
                r.tol,
                r.checked,
                r.flagged
            );
        }
        println!("{} checks, {} failed", results.len(), failed.len());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "{} gradient checks exceeded tolerance",
            failed.len()
        )))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::Synth(_) => cmd_synth(&cfg),
        Command::Train(_) => cmd_train(cfg),
        Command::Eval(a) => cmd_eval(cfg, a.json),
        Command::Ablate(a) => cmd_ablate(cfg, a.json),
        Command::Hampel(a) => cmd_hampel(&cfg, a.json),
        Command::Gradcheck(a) => cmd_gradcheck(&cfg, cli.seed.unwrap_or(0), a.json),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}
