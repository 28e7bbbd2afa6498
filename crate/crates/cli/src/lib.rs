//! Command-line driver: argument parsing, invocation manifests and the six
//! subcommands.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hiresnet::analysis::{
    activation_stats, emit_activation_report, emit_report, run_ablation, ReportFormat,
};
use hiresnet::architecture::{count_params, projection_param_delta};
use hiresnet::data::{
    cifar10_layout, load_cifar10, split_train_val, synthetic_dataset, Dataset, SplitSpec,
};
use hiresnet::gradcheck::{model_check, op_suite, SUITE_TOLERANCE};
use hiresnet::training::{
    evaluate, load_checkpoint, save_checkpoint, train_with, write_metrics_csv, TrainConfig,
    EVAL_BATCH,
};
use hiresnet::{Baseline, Model, ModelConfig, VariantMask};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] hiresnet::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hiresnet",
    version,
    about = "Train, evaluate and analyse hierarchical residual networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics, a checkpoint and a manifest.
    Train(Common),
    /// Evaluate a checkpoint on the test set.
    Eval(Common),
    /// Report residual and projection activation magnitudes of a checkpoint.
    Analyze(Common),
    /// Train every variant for every seed and report parameter counts and accuracy.
    Ablate(Common),
    /// Print total and per-group parameter counts.
    Params(Common),
    /// Run the finite-difference gradient suite.
    Gradcheck(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Analyze(_) => "analyze",
            Command::Ablate(_) => "ablate",
            Command::Params(_) => "params",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train(c)
            | Command::Eval(c)
            | Command::Analyze(c)
            | Command::Ablate(c)
            | Command::Params(c)
            | Command::Gradcheck(c) => c,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Model configuration (TOML). Defaults to the resnet preset.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Training configuration (TOML). Defaults to the standard protocol.
    #[arg(long = "train-config", value_name = "PATH")]
    train_config: Option<PathBuf>,
    /// Directory holding the CIFAR-10 binary files.
    #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use N synthetic class-conditional images instead of CIFAR-10.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Seed for initialization, splitting, shuffling and synthetic data.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Model checkpoint to evaluate or analyse.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Projection mask, overriding the config file: none, full, in, out, p1, p2, p3.
    #[arg(long)]
    mask: Option<String>,
    /// Comma-separated masks to ablate. Pairs after `custom:` continue the custom mask.
    #[arg(long)]
    variants: Option<String>,
    /// Comma-separated seeds to ablate.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Re-run the invocation recorded in a manifest.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Cifar10(PathBuf),
    Synthetic(usize),
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub val_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

impl Manifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| {
            CliError::Core(hiresnet::Error::Parse {
                what: path.display().to_string(),
                detail: e.to_string(),
            })
        })
    }

    fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(self).expect("manifest serializes to TOML");
        fs::write(&path, text).map_err(io_err(&path))
    }
}

/// Splits a comma-separated mask list. A `j-l` item directly after a
/// custom mask extends that mask.
pub fn parse_variants(list: &str) -> hiresnet::Result<Vec<VariantMask>> {
    let mut items: Vec<String> = Vec::new();
    for raw in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let is_pair = raw.split_once('-').is_some_and(|(a, b)| {
            !a.is_empty() && !b.is_empty() && (a.to_owned() + b).bytes().all(|c| c.is_ascii_digit())
        });
        match items.last_mut() {
            Some(last) if is_pair && last.starts_with("custom:") => {
                last.push(',');
                last.push_str(raw);
            }
            _ => items.push(raw.to_string()),
        }
    }
    items.iter().map(|s| s.parse()).collect()
}

fn resolve(command: &Command) -> CliResult<Manifest> {
    let c = command.common();
    if let Some(path) = &c.manifest {
        let m = Manifest::read(path)?;
        if m.command != command.name() {
            return Err(CliError::Usage(format!(
                "manifest {} records `{}`, not `{}`",
                path.display(),
                m.command,
                command.name()
            )));
        }
        return Ok(m);
    }
    let mut model = match &c.config {
        Some(p) => ModelConfig::from_file(p)?,
        None => ModelConfig::preset(Baseline::Resnet),
    };
    if let Some(mask) = &c.mask {
        model = model.with_mask(mask.parse()?);
        model.validate()?;
    }
    let mut train = match &c.train_config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    let seed = c.seed.unwrap_or(model.seed);
    model.seed = seed;
    train.seed = seed;
    let data = match (&c.data, c.synthetic) {
        (Some(dir), _) => Some(DataSource::Cifar10(dir.clone())),
        (None, Some(n)) => Some(DataSource::Synthetic(n)),
        (None, None) => None,
    };
    let variants = match &c.variants {
        Some(list) => parse_variants(list)?
            .iter()
            .map(ToString::to_string)
            .collect(),
        None if command.name() == "ablate" => VariantMask::ablation_set()
            .iter()
            .map(ToString::to_string)
            .collect(),
        None => Vec::new(),
    };
    let seeds = match &c.seeds {
        Some(s) => s.clone(),
        None if command.name() == "ablate" => vec![seed],
        None => Vec::new(),
    };
    let uses_training = matches!(command, Command::Train(_) | Command::Ablate(_));
    Ok(Manifest {
        command: command.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        val_fraction: SplitSpec::default().val_fraction,
        checkpoint: c.checkpoint.clone(),
        variants,
        seeds,
        data,
        model,
        train: uses_training.then_some(train),
    })
}

/// Training and held-out sets. CIFAR-10 yields `(train, test)`; synthetic
/// data yields one set used for both.
fn load(
    source: Option<&DataSource>,
    model: &ModelConfig,
    seed: u64,
) -> CliResult<(Dataset, Dataset)> {
    match source {
        None => Err(CliError::Usage(
            "one of --data DIR or --synthetic N is required".into(),
        )),
        Some(DataSource::Cifar10(dir)) => {
            if !dir.is_dir() {
                eprintln!("{}", cifar10_layout());
                return Err(CliError::Failed(format!(
                    "data directory {} does not exist",
                    dir.display()
                )));
            }
            Ok(load_cifar10(dir)?)
        }
        Some(DataSource::Synthetic(n)) => {
            let d = synthetic_dataset(*n, model.num_classes, model.input_shape, seed)?;
            Ok((d.clone(), d))
        }
    }
}

fn out_dir(c: &Common, command: &str) -> CliResult<PathBuf> {
    let dir = c
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("hiresnet-{command}")));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn train_split(m: &Manifest) -> CliResult<(Dataset, Dataset)> {
    let (train, _) = load(m.data.as_ref(), &m.model, m.seed)?;
    Ok(split_train_val(
        &train,
        SplitSpec::new(m.val_fraction, m.seed),
    )?)
}

fn cmd_params(m: &Manifest) -> CliResult<()> {
    let model = Model::new(&m.model)?;
    let count = count_params(&model);
    println!("baseline {}  mask {}", m.model.baseline, m.model.mask);
    println!("total {}", count.total);
    for (group, n) in count.per_group() {
        println!("  {group:<8} {n}");
    }
    println!(
        "projections +{}",
        projection_param_delta(&m.model, &m.model.mask)?
    );
    Ok(())
}

fn cmd_gradcheck(m: &Manifest) -> CliResult<()> {
    let mut ok = true;
    for check in op_suite(m.seed)? {
        let passed = check.report.passed();
        ok &= passed;
        println!(
            "{:<24} {:<28} max_rel_error {:.3e}  {}",
            check.op,
            check.shape,
            check.report.max_rel_error(),
            if passed { "ok" } else { "FAIL" }
        );
    }
    let model = model_check(m.seed)?;
    ok &= model.passed();
    println!(
        "{:<24} {:<28} max_rel_error {:.3e}  {}",
        "micro_network",
        "fine step",
        model.fine.max_rel_error(),
        if model.passed() { "ok" } else { "FAIL" }
    );
    println!(
        "{:<24} {:<28} max_rel_error {:.3e}  diagnostic",
        "micro_network",
        "suite step, kinks skipped",
        model.coarse.max_rel_error()
    );
    if ok {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check exceeded relative error {SUITE_TOLERANCE:e}"
        )))
    }
}

fn cmd_train(m: &Manifest, out: &Path) -> CliResult<()> {
    let cfg = m.train.clone().unwrap_or_default();
    let (train_set, val_set) = train_split(m)?;
    println!(
        "training {} ({} mask) on {} images, validating on {}",
        m.model.baseline,
        m.model.mask,
        train_set.len(),
        val_set.len()
    );
    let outcome = train_with(Model::new(&m.model)?, &train_set, &val_set, &cfg, |r| {
        println!("{}", r.summary())
    })?;
    write_metrics_csv(&out.join(METRICS_FILE), &outcome.metrics)?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    save_checkpoint(&outcome.model, &ckpt_dir.join(FINAL_CHECKPOINT))?;
    if let Some((epoch, top1)) = outcome.best_val_top1() {
        println!("best val top1 {top1:.4} at epoch {epoch}");
    }
    Ok(())
}

fn checkpoint_model(m: &Manifest) -> CliResult<Model> {
    let path = m
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint PATH is required".into()))?;
    Ok(load_checkpoint(path)?)
}

fn cmd_eval(m: &Manifest, out: &Path) -> CliResult<()> {
    let model = checkpoint_model(m)?;
    let (_, test) = load(m.data.as_ref(), model.config(), m.seed)?;
    let e = evaluate(&model, &test, EVAL_BATCH)?;
    println!(
        "{} images  loss {:.4}  top1 {:.4}  top5 {:.4}",
        test.len(),
        e.loss,
        e.top1,
        e.top5
    );
    let path = out.join(REPORT_FILE);
    let text = format!(
        "images,loss,top1,top5\n{},{},{},{}\n",
        test.len(),
        e.loss,
        e.top1,
        e.top5
    );
    fs::write(&path, text).map_err(io_err(&path))
}

fn cmd_analyze(m: &Manifest, out: &Path) -> CliResult<()> {
    let model = checkpoint_model(m)?;
    let (_, test) = load(m.data.as_ref(), model.config(), m.seed)?;
    let report = activation_stats(&model, &test, EVAL_BATCH)?;
    for level in &report.levels {
        println!(
            "level {}  residual {:.6}",
            level.level, level.mean_abs_residual
        );
        for (p, (_, ratio)) in level.projections.iter().zip(level.ratios()) {
            println!(
                "  from {}  projection {:.6}  ratio {:.4}",
                p.src, p.mean_abs, ratio
            );
        }
    }
    emit_activation_report(&report, &out.join(REPORT_FILE), ReportFormat::Rows)?;
    Ok(())
}

fn cmd_ablate(m: &Manifest, out: &Path) -> CliResult<()> {
    let cfg = m.train.clone().unwrap_or_default();
    let variants = m
        .variants
        .iter()
        .map(|v| v.parse())
        .collect::<hiresnet::Result<Vec<VariantMask>>>()?;
    let (train_set, val_set) = train_split(m)?;
    let result = run_ablation(
        &m.model,
        &variants,
        &train_set,
        &val_set,
        &cfg,
        &m.seeds,
        |v, s, acc| println!("{v:<12} seed {s:<4} val top1 {acc:.4}"),
    )?;
    println!(
        "{:<16} {:>9} {:>9} {:>9}",
        "variant", "params", "top1", "std"
    );
    for r in &result.rows {
        println!(
            "{:<16} {:>9} {:>9.4} {:>9.4}",
            r.variant, r.params, r.top1_mean, r.top1_std
        );
    }
    emit_report(&result, &out.join(REPORT_FILE), ReportFormat::Rows)?;
    Ok(())
}

fn execute(command: &Command) -> CliResult<()> {
    let manifest = resolve(command)?;
    let c = command.common();
    match command {
        Command::Params(_) | Command::Gradcheck(_) => {
            if let Some(dir) = &c.out {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                manifest.write(dir)?;
            }
            match command {
                Command::Params(_) => cmd_params(&manifest),
                _ => cmd_gradcheck(&manifest),
            }
        }
        _ => {
            let out = out_dir(c, command.name())?;
            manifest.write(&out)?;
            match command {
                Command::Train(_) => cmd_train(&manifest, &out),
                Command::Eval(_) => cmd_eval(&manifest, &out),
                Command::Analyze(_) => cmd_analyze(&manifest, &out),
                _ => cmd_ablate(&manifest, &out),
            }
        }
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
