//! Experiment runner: single runs, benchmark grids and dropout-rate sweeps.
//!
//! Every run is identified by `(dataset, estimator, dropout rate, seed)`. The
//! seed of repeat `r` is derived from the configured base seed, and it drives
//! both the train/test split and training, so estimators that share a repeat
//! index are compared on the same split.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_csv, synth_heteroscedastic, Dataset, Registry, SynthProfile, TargetColumn};
use crate::error::{Error, Result};
use crate::estimators::{self, EpochRecord, EstimatorKind, PredictionSet, TrainConfig};
use crate::metrics::{self, CalibrationCurve, CalibrationLevelSet};

pub const ARTIFACT_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
pub const DEFAULT_REPEATS: usize = 5;
pub const DEFAULT_SWEEP_RATES: [f64; 6] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5];
/// JSON Schema (draft 2020-12) that every `report.json` satisfies.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");
pub const SIGMA_HISTOGRAM_BINS: usize = 50;
pub const DEFAULT_REGISTRY: &str = "data/registry.toml";
pub const DEFAULT_SYNTHETIC_ROWS: usize = 1000;

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_repeats() -> usize {
    DEFAULT_REPEATS
}

fn default_registry() -> PathBuf {
    PathBuf::from(DEFAULT_REGISTRY)
}

fn default_threads() -> usize {
    1
}

fn default_synthetic_rows() -> usize {
    DEFAULT_SYNTHETIC_ROWS
}

fn default_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}

fn default_sweep_estimators() -> Vec<EstimatorKind> {
    vec![EstimatorKind::McDropout, EstimatorKind::DropoutHc]
}

fn default_rates() -> Vec<f64> {
    DEFAULT_SWEEP_RATES.to_vec()
}

/// Where the data for an experiment comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetRef {
    /// A named entry of the dataset registry.
    Registry { name: String },
    Synthetic {
        profile: SynthProfile,
        #[serde(default = "default_synthetic_rows")]
        n: usize,
        /// Seed of the generator; the data stay fixed across repeats.
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        target: TargetColumn,
        #[serde(default)]
        exclude: Vec<String>,
    },
}

impl DatasetRef {
    pub fn label(&self) -> String {
        match self {
            DatasetRef::Registry { name } => name.clone(),
            DatasetRef::Synthetic { profile, .. } => profile.name().to_string(),
            DatasetRef::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        }
    }

    pub fn load(&self, registry: &Path) -> Result<Dataset> {
        let mut data = match self {
            DatasetRef::Registry { name } => {
                if !registry.exists() {
                    return Err(Error::Data(format!(
                        "dataset {name:?} needs the registry at {}, which does not exist",
                        registry.display()
                    )));
                }
                Registry::load(registry)?.resolve(name)?
            }
            DatasetRef::Synthetic { profile, n, seed } => {
                synth_heteroscedastic(*n, *profile, *seed)?.dataset
            }
            DatasetRef::Csv {
                path,
                target,
                exclude,
            } => load_csv(path, target, exclude)?,
        };
        data.name = self.label();
        Ok(data)
    }
}

/// `synthetic:<profile>`, `csv:<path>` or a registry name.
impl std::str::FromStr for DatasetRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(profile) = s.strip_prefix("synthetic:") {
            Ok(DatasetRef::Synthetic {
                profile: profile.parse()?,
                n: DEFAULT_SYNTHETIC_ROWS,
                seed: 0,
            })
        } else if let Some(path) = s.strip_prefix("csv:") {
            Ok(DatasetRef::Csv {
                path: path.into(),
                target: TargetColumn::Last,
                exclude: vec![],
            })
        } else if s.is_empty() {
            Err(Error::Config("empty dataset reference".into()))
        } else {
            Ok(DatasetRef::Registry { name: s.into() })
        }
    }
}

/// Seed of repeat `repeat` under base seed `base` (SplitMix64 finalizer).
pub fn derive_seed(base: u64, repeat: usize) -> u64 {
    let mut z = base.wrapping_add((repeat as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn check_repeats(repeats: usize) -> Result<()> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    Ok(())
}

/// One estimator on one dataset, repeated with derived seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetRef,
    pub estimator: EstimatorKind,
    /// `train.seed` is replaced by the derived seed of each repeat.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub levels: CalibrationLevelSet,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_registry")]
    pub registry: PathBuf,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetRef, estimator: EstimatorKind) -> Self {
        Self {
            dataset,
            estimator,
            train: TrainConfig::default(),
            levels: CalibrationLevelSet::default(),
            out_dir: default_out_dir(),
            repeats: DEFAULT_REPEATS,
            seed: 0,
            registry: default_registry(),
        }
    }

    /// Reads JSON, or TOML when the file ends in `.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        read_config(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        check_repeats(self.repeats)?;
        self.train.validate(self.estimator)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats)
            .map(|r| derive_seed(self.seed, r))
            .collect()
    }
}

/// The dataset × estimator × repeat grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub datasets: Vec<DatasetRef>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub levels: CalibrationLevelSet,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_registry")]
    pub registry: PathBuf,
    /// Worker threads for the grid.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl BenchmarkConfig {
    pub fn new(datasets: Vec<DatasetRef>) -> Self {
        Self {
            datasets,
            estimators: default_estimators(),
            train: TrainConfig::default(),
            levels: CalibrationLevelSet::default(),
            out_dir: default_out_dir(),
            repeats: DEFAULT_REPEATS,
            seed: 0,
            registry: default_registry(),
            threads: 1,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_config(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Dropout-rate sweep for the MC-sampling estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub dataset: DatasetRef,
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
    #[serde(default = "default_sweep_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub levels: CalibrationLevelSet,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_registry")]
    pub registry: PathBuf,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl SweepConfig {
    pub fn new(dataset: DatasetRef) -> Self {
        Self {
            dataset,
            rates: default_rates(),
            estimators: default_sweep_estimators(),
            train: TrainConfig::default(),
            levels: CalibrationLevelSet::default(),
            out_dir: default_out_dir(),
            repeats: DEFAULT_REPEATS,
            seed: 0,
            registry: default_registry(),
            threads: 1,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_config(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// `count` equal-width bins spanning the observed σ range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl SigmaHistogram {
    pub fn new(sigma: &[f64], bins: usize) -> Result<Self> {
        if sigma.is_empty() || bins == 0 {
            return Err(Error::Domain(
                "histogram needs samples and at least one bin".into(),
            ));
        }
        let lo = sigma.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sigma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &s in sigma {
            let k = if width > 0.0 {
                (((s - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[k] += 1;
        }
        Ok(Self { lo, hi, counts })
    }

    pub fn edges(&self, k: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        let start = self.lo + width * k as f64;
        let end = if k + 1 == self.counts.len() {
            self.hi
        } else {
            self.lo + width * (k + 1) as f64
        };
        (start, end)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            let (a, b) = self.edges(k);
            let _ = writeln!(out, "{a},{b},{c}");
        }
        out
    }
}

/// Linear-interpolated empirical quantile, `q ∈ [0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!(
            "percentile {q} of {} values",
            values.len()
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    Ok(if i + 1 < v.len() {
        v[i] + frac * (v[i + 1] - v[i])
    } else {
        v[i]
    })
}

/// Everything one trained-and-evaluated run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub predictions: PredictionSet,
    pub rmse: f64,
    pub ce: f64,
    pub curve: CalibrationCurve,
    pub log: Vec<EpochRecord>,
    pub wall_time_ms: f64,
}

/// Split `dataset` with `seed`, train `kind` with `train` (its seed replaced by
/// `seed`) and evaluate on the held-out part. When `artifacts` is given the
/// training log is streamed there as JSONL and the model, predictions, curve
/// and σ histogram are written after evaluation.
pub fn execute_run(
    dataset: &Dataset,
    kind: EstimatorKind,
    train: &TrainConfig,
    levels: &CalibrationLevelSet,
    seed: u64,
    artifacts: Option<&Path>,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let cfg = TrainConfig {
        seed,
        ..train.clone()
    };
    cfg.validate(kind)?;
    let split = dataset.split(seed)?;
    let data = dataset.prepare(&split)?;

    let mut log_writer = match artifacts {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join("train_log.jsonl");
            Some((
                BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?),
                path,
            ))
        }
        None => None,
    };
    let mut write_err = None;
    let trained = estimators::train_with_log(kind, &data.train, &cfg, &mut |rec| {
        if let Some((w, path)) = log_writer.as_mut() {
            let line = serde_json::to_string(rec).expect("epoch record serializes");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                write_err.get_or_insert(Error::io(path.clone(), e));
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }

    let y_test = data.test_targets.to_vec();
    let predictions = estimators::predict(&trained, &data.test.x, &y_test, &data.stats)?;
    let rmse = metrics::rmse(&predictions)?;
    let (ce, curve) = metrics::calibration_error(&predictions, levels)?;

    if let Some(dir) = artifacts {
        trained.model.save(&dir.join("model.json"))?;
        write_json(&dir.join("predictions.json"), &predictions)?;
        curve.write_csv(&dir.join("curve.csv"))?;
        let hist = SigmaHistogram::new(&predictions.sigma, SIGMA_HISTOGRAM_BINS)?;
        let path = dir.join("sigma_histogram.csv");
        std::fs::write(&path, hist.to_csv()).map_err(|e| Error::io(&path, e))?;
    }

    Ok(RunOutcome {
        predictions,
        rmse,
        ce,
        curve,
        log: trained.log,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// One row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub estimator: EstimatorKind,
    pub dropout_rate: f64,
    pub repeat: usize,
    pub seed: u64,
    pub rmse: Option<f64>,
    pub ce: Option<f64>,
    pub wall_time_ms: f64,
    /// Set when the run failed; the metrics are then absent.
    pub error: Option<String>,
}

/// Mean and sample standard deviation over the successful repeats of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub estimator: EstimatorKind,
    pub dropout_rate: f64,
    pub runs: usize,
    pub failures: usize,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
    pub ce_mean: Option<f64>,
    pub ce_std: Option<f64>,
    /// 1 for the lowest mean CE on the dataset.
    pub ce_rank: Option<usize>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub version: String,
    pub config: serde_json::Value,
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

fn aggregate(runs: &[RunRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, EstimatorKind, f64)> = Vec::new();
    for r in runs {
        let key = (r.dataset.clone(), r.estimator, r.dropout_rate);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out: Vec<Aggregate> = keys
        .into_iter()
        .map(|(dataset, estimator, dropout_rate)| {
            let cell: Vec<_> = runs
                .iter()
                .filter(|r| {
                    r.dataset == dataset
                        && r.estimator == estimator
                        && r.dropout_rate == dropout_rate
                })
                .collect();
            let rmse: Vec<f64> = cell.iter().filter_map(|r| r.rmse).collect();
            let ce: Vec<f64> = cell.iter().filter_map(|r| r.ce).collect();
            let failures = cell.iter().filter(|r| r.error.is_some()).count();
            Aggregate {
                dataset,
                estimator,
                dropout_rate,
                runs: cell.len() - failures,
                failures,
                rmse_mean: mean_std(&rmse).map(|m| m.0),
                rmse_std: mean_std(&rmse).map(|m| m.1),
                ce_mean: mean_std(&ce).map(|m| m.0),
                ce_std: mean_std(&ce).map(|m| m.1),
                ce_rank: None,
                best: false,
            }
        })
        .collect();

    let datasets: Vec<String> = out.iter().map(|a| a.dataset.clone()).collect();
    for name in datasets {
        let mut ranked: Vec<(usize, f64)> = out
            .iter()
            .enumerate()
            .filter(|(_, a)| a.dataset == name)
            .filter_map(|(i, a)| a.ce_mean.map(|c| (i, c)))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for (rank, (i, _)) in ranked.into_iter().enumerate() {
            out[i].ce_rank = Some(rank + 1);
            out[i].best = rank == 0;
        }
    }
    out
}

impl BenchmarkReport {
    pub fn assemble<C: Serialize>(config: &C, runs: Vec<RunRecord>) -> Result<Self> {
        let aggregates = aggregate(&runs);
        Ok(Self {
            version: ARTIFACT_VERSION.to_string(),
            config: serde_json::to_value(config)?,
            runs,
            aggregates,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Copy with every wall-clock measurement zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for run in &mut r.runs {
            run.wall_time_ms = 0.0;
        }
        r
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| r.error.is_some())
    }

    pub fn aggregate_for(
        &self,
        dataset: &str,
        estimator: EstimatorKind,
        dropout_rate: f64,
    ) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| {
            a.dataset == dataset && a.estimator == estimator && a.dropout_rate == dropout_rate
        })
    }
}

/// Train and evaluate every repeat of one configuration, writing the report
/// and per-run artifacts under `out_dir`. The first failing repeat aborts;
/// artifacts already written, including its partial training log, stay on disk.
pub fn run_single(config: &ExperimentConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let dataset = config.dataset.load(&config.registry)?;
    create_dir(&config.out_dir)?;
    let mut runs = Vec::with_capacity(config.repeats);
    for (repeat, seed) in config.seeds().into_iter().enumerate() {
        let dir = config.out_dir.join(run_dir_name(
            &dataset.name,
            config.estimator,
            config.train.dropout_rate,
            repeat,
        ));
        let out = execute_run(
            &dataset,
            config.estimator,
            &config.train,
            &config.levels,
            seed,
            Some(&dir),
        )?;
        runs.push(RunRecord {
            dataset: dataset.name.clone(),
            estimator: config.estimator,
            dropout_rate: config.train.dropout_rate,
            repeat,
            seed,
            rmse: Some(out.rmse),
            ce: Some(out.ce),
            wall_time_ms: out.wall_time_ms,
            error: None,
        });
    }
    let report = BenchmarkReport::assemble(config, runs)?;
    report.save(&config.out_dir.join("report.json"))?;
    Ok(report)
}

fn run_dir_name(dataset: &str, kind: EstimatorKind, rate: f64, repeat: usize) -> String {
    format!("{dataset}_{kind}_p{rate}_r{repeat}")
}

struct Cell {
    dataset: usize,
    kind: EstimatorKind,
    train: TrainConfig,
    repeat: usize,
    seed: u64,
}

fn run_cells(
    cells: Vec<Cell>,
    datasets: &[Dataset],
    levels: &CalibrationLevelSet,
    threads: usize,
    out_dir: &Path,
) -> Result<Vec<RunRecord>> {
    if threads == 0 {
        return Err(Error::Config("threads must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs = pool.install(|| {
        cells
            .par_iter()
            .map(|c| {
                let data = &datasets[c.dataset];
                let rate = c.train.dropout_rate;
                let dir = out_dir.join(run_dir_name(&data.name, c.kind, rate, c.repeat));
                let start = Instant::now();
                let result = execute_run(data, c.kind, &c.train, levels, c.seed, Some(&dir));
                let (rmse, ce, error, wall) = match result {
                    Ok(o) => (Some(o.rmse), Some(o.ce), None, o.wall_time_ms),
                    Err(e) => (
                        None,
                        None,
                        Some(e.to_string()),
                        start.elapsed().as_secs_f64() * 1e3,
                    ),
                };
                RunRecord {
                    dataset: data.name.clone(),
                    estimator: c.kind,
                    dropout_rate: rate,
                    repeat: c.repeat,
                    seed: c.seed,
                    rmse,
                    ce,
                    wall_time_ms: wall,
                    error,
                }
            })
            .collect()
    });
    Ok(runs)
}

fn load_all(refs: &[DatasetRef], registry: &Path) -> Result<Vec<Dataset>> {
    let data: Vec<Dataset> = refs
        .iter()
        .map(|r| r.load(registry))
        .collect::<Result<_>>()?;
    for (i, d) in data.iter().enumerate() {
        if data[..i].iter().any(|o| o.name == d.name) {
            return Err(Error::Config(format!("dataset {:?} listed twice", d.name)));
        }
    }
    Ok(data)
}

/// The full dataset × estimator × repeat grid. Cells run on a pool of
/// `threads` workers; a failing cell is recorded and the grid continues.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    check_repeats(config.repeats)?;
    if config.datasets.is_empty() || config.estimators.is_empty() {
        return Err(Error::Config(
            "benchmark needs datasets and estimators".into(),
        ));
    }
    let datasets = load_all(&config.datasets, &config.registry)?;
    create_dir(&config.out_dir)?;
    let mut cells = Vec::new();
    for d in 0..datasets.len() {
        for &kind in &config.estimators {
            for repeat in 0..config.repeats {
                cells.push(Cell {
                    dataset: d,
                    kind,
                    train: config.train.clone(),
                    repeat,
                    seed: derive_seed(config.seed, repeat),
                });
            }
        }
    }
    let runs = run_cells(
        cells,
        &datasets,
        &config.levels,
        config.threads,
        &config.out_dir,
    )?;
    let report = BenchmarkReport::assemble(config, runs)?;
    report.save(&config.out_dir.join("report.json"))?;
    Ok(report)
}

/// CE statistics of one (rate, estimator) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub estimator: EstimatorKind,
    pub runs: usize,
    pub ce_mean: Option<f64>,
    pub ce_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub report: BenchmarkReport,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rate,estimator,runs,ce_mean,ce_std\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.rate,
                r.estimator,
                r.runs,
                opt(r.ce_mean),
                opt(r.ce_std)
            );
        }
        out
    }

    /// Per-run rows: one per rate, estimator and repeat.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("rate,estimator,repeat,seed,ce,rmse\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.report.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.dropout_rate,
                r.estimator,
                r.repeat,
                r.seed,
                opt(r.ce),
                opt(r.rmse)
            );
        }
        out
    }

    /// `max − min` of the mean CE across rates for `estimator`.
    pub fn ce_range(&self, estimator: EstimatorKind) -> Option<f64> {
        let means: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.estimator == estimator)
            .map(|r| r.ce_mean)
            .collect::<Option<_>>()?;
        let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = means.iter().copied().fold(f64::INFINITY, f64::min);
        (!means.is_empty()).then_some(max - min)
    }
}

/// CE as a function of the dropout rate. Writes `sweep.csv` (one row per rate
/// and estimator), `sweep_runs.csv` (one row per run) and `report.json`.
pub fn sweep_dropout_rate(config: &SweepConfig) -> Result<SweepReport> {
    check_repeats(config.repeats)?;
    if config.rates.is_empty() || config.estimators.is_empty() {
        return Err(Error::Config("sweep needs rates and estimators".into()));
    }
    for &rate in &config.rates {
        for &kind in &config.estimators {
            TrainConfig {
                dropout_rate: rate,
                ..config.train.clone()
            }
            .validate(kind)?;
        }
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::Config(format!("dropout rate {rate} outside (0, 1)")));
        }
    }
    let dataset = config.dataset.load(&config.registry)?;
    create_dir(&config.out_dir)?;
    let mut cells = Vec::new();
    for &rate in &config.rates {
        for &kind in &config.estimators {
            for repeat in 0..config.repeats {
                cells.push(Cell {
                    dataset: 0,
                    kind,
                    train: TrainConfig {
                        dropout_rate: rate,
                        ..config.train.clone()
                    },
                    repeat,
                    seed: derive_seed(config.seed, repeat),
                });
            }
        }
    }
    let runs = run_cells(
        cells,
        std::slice::from_ref(&dataset),
        &config.levels,
        config.threads,
        &config.out_dir,
    )?;
    let report = BenchmarkReport::assemble(config, runs)?;
    let rows = report
        .aggregates
        .iter()
        .map(|a| SweepRow {
            rate: a.dropout_rate,
            estimator: a.estimator,
            runs: a.runs,
            ce_mean: a.ce_mean,
            ce_std: a.ce_std,
        })
        .collect();
    let sweep = SweepReport { report, rows };
    sweep.report.save(&config.out_dir.join("report.json"))?;
    for (name, text) in [
        ("sweep.csv", sweep.to_csv()),
        ("sweep_runs.csv", sweep.runs_csv()),
    ] {
        let path = config.out_dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(sweep)
}

/// Calibration curve of a saved prediction set.
pub fn curve_from_predictions(
    path: &Path,
    levels: &CalibrationLevelSet,
) -> Result<(f64, CalibrationCurve)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: PredictionSet = serde_json::from_str(&text)?;
    let preds = PredictionSet::new(raw.estimator, raw.mu, raw.sigma, raw.y)?;
    metrics::calibration_error(&preds, levels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_train() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            hidden_widths: vec![8, 8],
            mc_iterations: 4,
            predict_mc_iterations: 8,
            ..TrainConfig::default()
        }
    }

    fn synthetic(profile: SynthProfile) -> DatasetRef {
        DatasetRef::Synthetic {
            profile,
            n: 200,
            seed: 1,
        }
    }

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let seeds: Vec<u64> = (0..3).map(|r| derive_seed(42, r)).collect();
        assert_ne!(seeds[0], seeds[1]);
        assert_ne!(seeds[1], seeds[2]);
        assert_ne!(seeds[0], seeds[2]);
        assert_eq!(
            seeds,
            (0..3).map(|r| derive_seed(42, r)).collect::<Vec<_>>()
        );
        assert_ne!(derive_seed(0, 0), derive_seed(1, 0));
    }

    #[test]
    fn dataset_ref_parsing() {
        assert_eq!(
            "boston".parse::<DatasetRef>().unwrap(),
            DatasetRef::Registry {
                name: "boston".into()
            }
        );
        assert!(matches!(
            "synthetic:uniform_band".parse::<DatasetRef>().unwrap(),
            DatasetRef::Synthetic {
                profile: SynthProfile::UniformBand,
                ..
            }
        ));
        assert!(matches!(
            "synthetic:nope".parse::<DatasetRef>(),
            Err(Error::Config(_))
        ));
        let csv: DatasetRef = "csv:/tmp/x.csv".parse().unwrap();
        assert_eq!(csv.label(), "x");
    }

    #[test]
    fn histogram_bins_cover_range() {
        let s: Vec<f64> = (0..=100).map(|i| i as f64 / 10.0).collect();
        let h = SigmaHistogram::new(&s, SIGMA_HISTOGRAM_BINS).unwrap();
        assert_eq!(h.counts.len(), 50);
        assert_eq!(h.counts.iter().sum::<usize>(), s.len());
        assert_eq!((h.lo, h.hi), (0.0, 10.0));
        assert_eq!(h.edges(49).1, 10.0);
        assert_eq!(h.to_csv().lines().count(), 51);

        let flat = SigmaHistogram::new(&[0.5; 7], 50).unwrap();
        assert_eq!(flat.counts[0], 7);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [3.0, 1.0, 2.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5).unwrap(), 3.0);
        assert_eq!(percentile(&v, 1.0).unwrap(), 5.0);
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert!((percentile(&v, 0.95).unwrap() - 4.8).abs() < 1e-12);
        assert!(percentile(&[], 0.5).is_err());
    }

    #[test]
    fn ranks_mark_lowest_ce() {
        let rec = |est, ce| RunRecord {
            dataset: "d".into(),
            estimator: est,
            dropout_rate: 0.2,
            repeat: 0,
            seed: 0,
            rmse: Some(1.0),
            ce,
            wall_time_ms: 0.0,
            error: None,
        };
        let runs = vec![
            rec(EstimatorKind::McDropout, Some(0.9)),
            rec(EstimatorKind::Hnn, Some(0.5)),
            rec(EstimatorKind::DropoutHc, Some(0.1)),
            RunRecord {
                error: Some("boom".into()),
                ..rec(EstimatorKind::QuantileHc, None)
            },
        ];
        let aggs = aggregate(&runs);
        let best: Vec<_> = aggs.iter().filter(|a| a.best).collect();
        assert_eq!(best.len(), 1);
        assert_eq!(best[0].estimator, EstimatorKind::DropoutHc);
        let q = aggs
            .iter()
            .find(|a| a.estimator == EstimatorKind::QuantileHc)
            .unwrap();
        assert_eq!((q.runs, q.failures, q.ce_rank), (0, 1, None));
        let mc = aggs
            .iter()
            .find(|a| a.estimator == EstimatorKind::McDropout)
            .unwrap();
        assert_eq!(mc.ce_rank, Some(3));
    }

    #[test]
    fn single_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(
            synthetic(SynthProfile::UniformBand),
            EstimatorKind::QuantileHc,
        );
        cfg.train = quick_train();
        cfg.repeats = 1;
        cfg.out_dir = dir.path().to_path_buf();
        let report = run_single(&cfg).unwrap();
        assert_eq!(report.runs.len(), 1);
        let run = &report.runs[0];
        assert!(run.rmse.unwrap().is_finite() && run.ce.unwrap().is_finite());
        let run_dir = dir.path().join(run_dir_name(
            "uniform_band",
            EstimatorKind::QuantileHc,
            0.2,
            0,
        ));
        for f in [
            "curve.csv",
            "sigma_histogram.csv",
            "predictions.json",
            "train_log.jsonl",
            "model.json",
        ] {
            assert!(run_dir.join(f).exists(), "{f}");
        }
        let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(dir.path().join("report.json").exists());
        let (ce, _) =
            curve_from_predictions(&run_dir.join("predictions.json"), &cfg.levels).unwrap();
        assert_eq!(ce, run.ce.unwrap());
    }

    #[test]
    fn missing_registry_dataset_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(
            DatasetRef::Registry {
                name: "boston".into(),
            },
            EstimatorKind::McDropout,
        );
        cfg.registry = dir.path().join("absent.toml");
        let err = run_single(&cfg).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn zero_rate_sweep_is_rejected() {
        let mut cfg = SweepConfig::new(synthetic(SynthProfile::LinearGauss));
        cfg.rates = vec![0.0, 0.2];
        assert!(matches!(sweep_dropout_rate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_json_and_toml() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(
            synthetic(SynthProfile::SineAbsNoise),
            EstimatorKind::DropoutHc,
        );
        cfg.train.learning_rate = 3e-3;
        let path = dir.path().join("c.json");
        cfg.save(&path).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);

        let toml_path = dir.path().join("c.toml");
        std::fs::write(
            &toml_path,
            "estimator = \"hnn\"\nrepeats = 2\n[dataset]\nkind = \"registry\"\nname = \"boston\"\n[train]\nepochs = 7\n",
        )
        .unwrap();
        let t = ExperimentConfig::load(&toml_path).unwrap();
        assert_eq!(t.estimator, EstimatorKind::Hnn);
        assert_eq!(t.train.epochs, 7);
        assert_eq!(t.train.mc_iterations, TrainConfig::default().mc_iterations);
        assert_eq!(t.levels, CalibrationLevelSet::default());
    }
}
