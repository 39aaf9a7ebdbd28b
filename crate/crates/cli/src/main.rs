use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hetcal::data::{EntryStatus, Registry};
use hetcal::estimators::{EstimatorKind, TrainConfig};
use hetcal::experiment::{
    self, BenchmarkConfig, BenchmarkReport, DatasetRef, ExperimentConfig, SweepConfig,
};
use hetcal::metrics::CalibrationLevelSet;
use hetcal::{Error, Result};
use serde::de::DeserializeOwned;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Parser)]
#[command(
    name = "hetcal",
    version,
    about = "Calibrated deep regression benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one estimator on one dataset (repeated with derived seeds).
    Train(TrainCmd),
    /// Run the dataset x estimator x repeat grid.
    Bench(BenchCmd),
    /// CE as a function of the dropout rate.
    #[command(name = "sweep-p")]
    SweepP(SweepCmd),
    /// Calibration curve CSV from a saved predictions.json.
    Curve(CurveCmd),
    /// Check the dataset registry against the files on disk.
    Datasets(DatasetsCmd),
}

#[derive(Debug, Args)]
struct Common {
    /// Serialized config (JSON, or TOML by extension); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Comma-separated calibration levels.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// Write the effective config here and exit without training.
    #[arg(long)]
    dump_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mc_iterations: Option<usize>,
    #[arg(long)]
    predict_mc_iterations: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    tau_u: Option<f64>,
    #[arg(long)]
    tau_l: Option<f64>,
    #[arg(long)]
    lambda_h: Option<f64>,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    lambda_l: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    variance_floor: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    hidden_widths: Option<Vec<usize>>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    /// he_uniform | fan_in_uniform
    #[arg(long)]
    init: Option<String>,
    /// population | unbiased
    #[arg(long)]
    variance_divisor: Option<String>,
    /// full | detached
    #[arg(long)]
    sigma_gradient: Option<String>,
    #[arg(long)]
    dropout_in_deterministic_heads: Option<bool>,
}

#[derive(Debug, Args)]
struct TrainCmd {
    /// Registry name, `synthetic:<profile>` or `csv:<path>`.
    #[arg(long)]
    dataset: Option<DatasetRef>,
    #[arg(long)]
    estimator: Option<EstimatorKind>,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct BenchCmd {
    #[arg(long, value_delimiter = ',')]
    datasets: Option<Vec<DatasetRef>>,
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorKind>>,
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct SweepCmd {
    #[arg(long)]
    dataset: Option<DatasetRef>,
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorKind>>,
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct CurveCmd {
    /// predictions.json written by a run.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DatasetsCmd {
    #[arg(long, default_value = experiment::DEFAULT_REGISTRY)]
    registry: PathBuf,
}

fn parse_tag<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown {what} {s:?}")))
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { t.$f = v.clone(); })*};
        }
        set!(
            epochs,
            mc_iterations,
            predict_mc_iterations,
            dropout_rate,
            tau_u,
            tau_l,
            batch_size,
            learning_rate,
            variance_floor,
            hidden_widths,
            dropout_in_deterministic_heads
        );
        if let Some(v) = self.lambda_h {
            t.weights.lambda_h = v;
        }
        if let Some(v) = self.lambda_u {
            t.weights.lambda_u = v;
        }
        if let Some(v) = self.lambda_l {
            t.weights.lambda_l = v;
        }
        if self.max_grad_norm.is_some() {
            t.max_grad_norm = self.max_grad_norm;
        }
        if let Some(s) = &self.init {
            t.init = parse_tag("init scheme", s)?;
        }
        if let Some(s) = &self.variance_divisor {
            t.variance_divisor = parse_tag("variance divisor", s)?;
        }
        if let Some(s) = &self.sigma_gradient {
            t.sigma_gradient = parse_tag("sigma gradient mode", s)?;
        }
        Ok(())
    }
}

struct Shared<'a> {
    train: &'a mut TrainConfig,
    levels: &'a mut CalibrationLevelSet,
    out_dir: &'a mut PathBuf,
    repeats: &'a mut usize,
    seed: &'a mut u64,
    registry: &'a mut PathBuf,
}

impl Common {
    fn apply(&self, s: Shared<'_>, flags: &TrainFlags) -> Result<()> {
        flags.apply(s.train)?;
        if let Some(levels) = &self.levels {
            *s.levels = CalibrationLevelSet::new(levels.clone())?;
        }
        if let Some(d) = &self.out_dir {
            *s.out_dir = d.clone();
        }
        if let Some(r) = self.repeats {
            *s.repeats = r;
        }
        if let Some(seed) = self.seed {
            *s.seed = seed;
        }
        if let Some(r) = &self.registry {
            *s.registry = r.clone();
        }
        Ok(())
    }
}

fn missing(flag: &str) -> Error {
    Error::Config(format!("--{flag} is required unless --config supplies it"))
}

fn save_config<T: serde::Serialize>(config: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let text = serde_json::to_string_pretty(config)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn print_aggregates(report: &BenchmarkReport) {
    println!(
        "{:<16} {:<12} {:>6} {:>6} {:>10} {:>10} {:>10} {:>10} {:>5}",
        "dataset", "estimator", "p", "runs", "rmse", "±", "ce", "±", "rank"
    );
    for a in &report.aggregates {
        let rank = a.ce_rank.map_or("-".into(), |r| {
            if a.best {
                format!("{r}*")
            } else {
                r.to_string()
            }
        });
        println!(
            "{:<16} {:<12} {:>6} {:>6} {:>10} {:>10} {:>10} {:>10} {:>5}",
            a.dataset,
            a.estimator.name(),
            a.dropout_rate,
            a.runs,
            fmt_opt(a.rmse_mean),
            fmt_opt(a.rmse_std),
            fmt_opt(a.ce_mean),
            fmt_opt(a.ce_std),
            rank
        );
    }
    for f in report.failures() {
        eprintln!(
            "failed: {} {} p={} repeat {}: {}",
            f.dataset,
            f.estimator,
            f.dropout_rate,
            f.repeat,
            f.error.as_deref().unwrap_or("")
        );
    }
}

fn train(cmd: TrainCmd) -> Result<()> {
    let mut config = match &cmd.common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(
            cmd.dataset.clone().ok_or_else(|| missing("dataset"))?,
            cmd.estimator.ok_or_else(|| missing("estimator"))?,
        ),
    };
    if let Some(d) = cmd.dataset {
        config.dataset = d;
    }
    if let Some(e) = cmd.estimator {
        config.estimator = e;
    }
    cmd.common.apply(
        Shared {
            train: &mut config.train,
            levels: &mut config.levels,
            out_dir: &mut config.out_dir,
            repeats: &mut config.repeats,
            seed: &mut config.seed,
            registry: &mut config.registry,
        },
        &cmd.train,
    )?;
    config.validate()?;
    if let Some(path) = &cmd.common.dump_config {
        return save_config(&config, path);
    }
    save_config(&config, &config.out_dir.join("config.json"))?;
    let report = experiment::run_single(&config)?;
    for r in &report.runs {
        println!(
            "{} {} repeat {} seed {}: rmse {} ce {}",
            r.dataset,
            r.estimator,
            r.repeat,
            r.seed,
            fmt_opt(r.rmse),
            fmt_opt(r.ce)
        );
    }
    print_aggregates(&report);
    Ok(())
}

fn bench(cmd: BenchCmd) -> Result<()> {
    let mut config = match &cmd.common.config {
        Some(path) => BenchmarkConfig::load(path)?,
        None => BenchmarkConfig::new(cmd.datasets.clone().ok_or_else(|| missing("datasets"))?),
    };
    if let Some(d) = cmd.datasets {
        config.datasets = d;
    }
    if let Some(e) = cmd.estimators {
        config.estimators = e;
    }
    if let Some(t) = cmd.threads {
        config.threads = t;
    }
    cmd.common.apply(
        Shared {
            train: &mut config.train,
            levels: &mut config.levels,
            out_dir: &mut config.out_dir,
            repeats: &mut config.repeats,
            seed: &mut config.seed,
            registry: &mut config.registry,
        },
        &cmd.train,
    )?;
    for &kind in &config.estimators {
        config.train.validate(kind)?;
    }
    if let Some(path) = &cmd.common.dump_config {
        return save_config(&config, path);
    }
    save_config(&config, &config.out_dir.join("config.json"))?;
    let report = experiment::run_benchmark(&config)?;
    print_aggregates(&report);
    Ok(())
}

fn sweep(cmd: SweepCmd) -> Result<()> {
    let mut config = match &cmd.common.config {
        Some(path) => SweepConfig::load(path)?,
        None => SweepConfig::new(cmd.dataset.clone().ok_or_else(|| missing("dataset"))?),
    };
    if let Some(d) = cmd.dataset {
        config.dataset = d;
    }
    if let Some(r) = cmd.rates {
        config.rates = r;
    }
    if let Some(e) = cmd.estimators {
        config.estimators = e;
    }
    if let Some(t) = cmd.threads {
        config.threads = t;
    }
    cmd.common.apply(
        Shared {
            train: &mut config.train,
            levels: &mut config.levels,
            out_dir: &mut config.out_dir,
            repeats: &mut config.repeats,
            seed: &mut config.seed,
            registry: &mut config.registry,
        },
        &cmd.train,
    )?;
    if let Some(path) = &cmd.common.dump_config {
        return save_config(&config, path);
    }
    save_config(&config, &config.out_dir.join("config.json"))?;
    let sweep = experiment::sweep_dropout_rate(&config)?;
    print!("{}", sweep.to_csv());
    for &kind in &config.estimators {
        println!("# {kind} CE range {}", fmt_opt(sweep.ce_range(kind)));
    }
    for f in sweep.report.failures() {
        eprintln!(
            "failed: {} p={} repeat {}",
            f.estimator, f.dropout_rate, f.repeat
        );
    }
    Ok(())
}

fn curve(cmd: CurveCmd) -> Result<()> {
    let levels = match cmd.levels {
        Some(l) => CalibrationLevelSet::new(l)?,
        None => CalibrationLevelSet::default(),
    };
    let (ce, curve) = experiment::curve_from_predictions(&cmd.predictions, &levels)?;
    match cmd.out {
        Some(path) => {
            curve.write_csv(&path)?;
            println!("ce {ce:.6} -> {}", path.display());
        }
        None => print!("{}", curve.to_csv()),
    }
    Ok(())
}

fn datasets(cmd: DatasetsCmd) -> Result<()> {
    let reg = Registry::load(&cmd.registry)?;
    let mut bad = 0;
    let mut available = 0;
    for (name, status) in reg.check() {
        let entry = reg.entry(&name).expect("checked entry exists");
        match status {
            EntryStatus::Ok { rows, features } => {
                available += 1;
                println!("{name:<12} ok        {rows} rows, {features} features");
            }
            EntryStatus::Missing(path) => {
                println!("{name:<12} missing   {} ({})", path.display(), entry.source);
            }
            EntryStatus::Mismatch { rows, features } => {
                bad += 1;
                println!(
                    "{name:<12} mismatch  {rows}x{features}, expected {}x{}",
                    entry.rows, entry.features
                );
            }
            EntryStatus::Unreadable(err) => {
                bad += 1;
                println!("{name:<12} error     {err}");
            }
        }
    }
    println!("{available} of {} datasets available", reg.entries.len());
    if bad > 0 {
        return Err(Error::Data(format!(
            "{bad} registry entries do not match their files"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(c) => train(c),
        Command::Bench(c) => bench(c),
        Command::SweepP(c) => sweep(c),
        Command::Curve(c) => curve(c),
        Command::Datasets(c) => datasets(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
