//! Dataset ingestion, seeded train/test splitting, train-only standardization,
//! synthetic generators with known noise profiles, and the dataset registry.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TEST_FRACTION: f64 = 0.2;
pub const MIN_SPLIT_ROWS: usize = 10;
const CONSTANT_COLUMN_STD: f64 = 1e-12;
const MISSING_MARKERS: [&str; 5] = ["", "NA", "?", "nan", "NaN"];

/// Raw (unstandardized) dataset, rows in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub features: Array2<f64>,
    pub targets: Array1<f64>,
    /// Rows dropped for missing values during ingestion.
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Array2<f64>,
        targets: Array1<f64>,
    ) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::Data("dataset has no feature columns".into()));
        }
        if features
            .iter()
            .chain(targets.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        let feature_names = (0..features.ncols()).map(|j| format!("x{j}")).collect();
        Ok(Self {
            name: name.into(),
            feature_names,
            target_name: "y".into(),
            features,
            targets,
            dropped_rows: 0,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn split(&self, seed: u64) -> Result<Split> {
        Split::new(self.n_rows(), seed)
    }

    /// Standardize with statistics from `split.train` only.
    pub fn prepare(&self, split: &Split) -> Result<SplitData> {
        if split.train.len() + split.test.len() != self.n_rows() {
            return Err(Error::Data("split does not match dataset size".into()));
        }
        let stats = Standardization::fit(self, &split.train);
        let part = |rows: &[usize]| Standardized {
            x: stats.transform_features(&self.features.select(Axis(0), rows)),
            y: stats.transform_targets(&self.targets.select(Axis(0), rows)),
        };
        Ok(SplitData {
            name: self.name.clone(),
            train: part(&split.train),
            test: part(&split.test),
            test_targets: self.targets.select(Axis(0), &split.test),
            stats,
        })
    }
}

/// Which CSV column holds the regression target.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetColumn {
    #[default]
    Last,
    Index(usize),
    Name(String),
}

impl std::str::FromStr for TargetColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "" | "last" => TargetColumn::Last,
            _ => match s.parse() {
                Ok(i) => TargetColumn::Index(i),
                Err(_) => TargetColumn::Name(s.to_string()),
            },
        })
    }
}

/// Read a headered, comma-separated numeric CSV. Rows with missing cells are
/// dropped and counted; any other unparseable cell is an error.
pub fn load_csv(path: &Path, target: &TargetColumn, exclude: &[String]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();

    for name in exclude {
        if !header.contains(name) {
            return Err(Error::Data(format!(
                "excluded column {name:?} not in header"
            )));
        }
    }
    let kept: Vec<usize> = (0..header.len())
        .filter(|&j| !exclude.contains(&header[j]))
        .collect();
    let target_idx = match target {
        TargetColumn::Last => *kept
            .last()
            .ok_or_else(|| Error::Data("no columns left after exclusions".into()))?,
        TargetColumn::Index(i) => {
            if *i >= header.len() {
                return Err(Error::Data(format!("target index {i} out of range")));
            }
            *i
        }
        TargetColumn::Name(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("target column {name:?} not in header")))?,
    };
    let feature_idx: Vec<usize> = kept.into_iter().filter(|&j| j != target_idx).collect();
    if feature_idx.is_empty() {
        return Err(Error::Data("no feature columns".into()));
    }

    let mut feats = Vec::new();
    let mut targets = Vec::new();
    let mut dropped = 0;
    for (row_no, record) in reader.records().enumerate() {
        let line = row_no + 2;
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if record.len() != header.len() {
            return Err(Error::Data(format!(
                "row {line}: expected {} cells, found {}",
                header.len(),
                record.len()
            )));
        }
        let used = feature_idx.iter().chain(std::iter::once(&target_idx));
        if used.clone().any(|&j| MISSING_MARKERS.contains(&&record[j])) {
            dropped += 1;
            continue;
        }
        let parse = |j: usize| -> Result<f64> {
            let cell = &record[j];
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Data(format!(
                    "row {line}, column {} ({}): cannot parse {cell:?}",
                    j + 1,
                    header[j]
                ))),
            }
        };
        for &j in &feature_idx {
            feats.push(parse(j)?);
        }
        targets.push(parse(target_idx)?);
    }
    if targets.is_empty() {
        return Err(Error::Data(format!("{}: no usable rows", path.display())));
    }
    let n = targets.len();
    let features = Array2::from_shape_vec((n, feature_idx.len()), feats)
        .map_err(|e| Error::Data(e.to_string()))?;
    Ok(Dataset {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        feature_names: feature_idx.iter().map(|&j| header[j].clone()).collect(),
        target_name: header[target_idx].clone(),
        features,
        targets: Array1::from(targets),
        dropped_rows: dropped,
    })
}

/// Disjoint train/test row indices, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl Split {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n < MIN_SPLIT_ROWS {
            return Err(Error::Data(format!(
                "need at least {MIN_SPLIT_ROWS} rows to split, got {n}"
            )));
        }
        let n_test = (TEST_FRACTION * n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut test = idx[..n_test].to_vec();
        let mut train = idx[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Ok(Self { train, test, seed })
    }
}

/// Column means and (population) standard deviations of the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > CONSTANT_COLUMN_STD { std } else { 1.0 })
}

impl Standardization {
    pub fn fit(data: &Dataset, rows: &[usize]) -> Self {
        let (feature_means, feature_stds) = (0..data.n_features())
            .map(|j| mean_std(rows.iter().map(|&i| data.features[[i, j]])))
            .unzip();
        let (target_mean, target_std) = mean_std(rows.iter().map(|&i| data.targets[i]));
        Self {
            feature_means,
            feature_stds,
            target_mean,
            target_std,
        }
    }

    pub fn transform_features(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.feature_means[j], self.feature_stds[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    pub fn inverse_features(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = z.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.feature_means[j], self.feature_stds[j]);
            col.mapv_inplace(|v| v * s + m);
        }
        out
    }

    pub fn transform_targets(&self, y: &Array1<f64>) -> Array1<f64> {
        y.mapv(|v| (v - self.target_mean) / self.target_std)
    }

    pub fn inverse_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }

    /// Spreads scale without the shift.
    pub fn inverse_scale(&self, s: f64) -> f64 {
        s * self.target_std
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl Standardized {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// A dataset split and standardized with train-only statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub name: String,
    pub train: Standardized,
    pub test: Standardized,
    /// Test targets in original units.
    pub test_targets: Array1<f64>,
    pub stats: Standardization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthProfile {
    /// `y = 3x + ε`, `ε ~ N(0, 0.5²)`, `x ~ U[−3, 3]`.
    LinearGauss,
    /// `y = sin x + |x|·ε/3`, `ε ~ N(0, 1)`, `x ~ U[−3, 3]`.
    SineAbsNoise,
    /// `y ~ U[−1, 1]` with a single constant feature.
    UniformBand,
}

impl std::str::FromStr for SynthProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_gauss" => Ok(Self::LinearGauss),
            "sine_abs_noise" => Ok(Self::SineAbsNoise),
            "uniform_band" => Ok(Self::UniformBand),
            other => Err(Error::Config(format!(
                "unknown synthetic profile {other:?}"
            ))),
        }
    }
}

impl SynthProfile {
    pub fn name(self) -> &'static str {
        match self {
            Self::LinearGauss => "linear_gauss",
            Self::SineAbsNoise => "sine_abs_noise",
            Self::UniformBand => "uniform_band",
        }
    }
}

pub const LINEAR_GAUSS_NOISE: f64 = 0.5;

/// Synthetic data with its per-row ground-truth noise standard deviation.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub true_sigma: Vec<f64>,
}

pub fn synth_heteroscedastic(n: usize, profile: SynthProfile, seed: u64) -> Result<Synthetic> {
    synthesize(n, profile, seed, true)
}

/// Like [`synth_heteroscedastic`]; `noisy = false` zeroes the noise term.
pub fn synthesize(n: usize, profile: SynthProfile, seed: u64, noisy: bool) -> Result<Synthetic> {
    if n < 100 {
        return Err(Error::Config(format!(
            "synthetic datasets need n >= 100, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let xs = Uniform::new_inclusive(-3.0, 3.0).expect("valid range");
    let band = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let gate = if noisy { 1.0 } else { 0.0 };

    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for _ in 0..n {
        match profile {
            SynthProfile::LinearGauss => {
                let xi: f64 = xs.sample(&mut rng);
                let s = LINEAR_GAUSS_NOISE * gate;
                x.push(xi);
                y.push(3.0 * xi + s * unit.sample(&mut rng));
                sigma.push(s);
            }
            SynthProfile::SineAbsNoise => {
                let xi: f64 = xs.sample(&mut rng);
                let s = xi.abs() / 3.0 * gate;
                x.push(xi);
                y.push(xi.sin() + s * unit.sample(&mut rng));
                sigma.push(s);
            }
            SynthProfile::UniformBand => {
                x.push(1.0);
                y.push(gate * band.sample(&mut rng));
                sigma.push(gate / 3f64.sqrt());
            }
        }
    }
    let mut dataset = Dataset::new(
        profile.name(),
        Array2::from_shape_vec((n, 1), x).map_err(|e| Error::Data(e.to_string()))?,
        Array1::from(y),
    )?;
    dataset.feature_names = vec!["x".into()];
    Ok(Synthetic {
        dataset,
        true_sigma: sigma,
    })
}

/// One registry entry: where a benchmark dataset lives and what it should look like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    /// Relative to the registry file's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub target: TargetColumn,
    #[serde(default)]
    pub exclude: Vec<String>,
    pub rows: usize,
    pub features: usize,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    #[serde(rename = "dataset")]
    pub entries: Vec<RegistryEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Outcome of checking one registry entry against the file on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum EntryStatus {
    Ok { rows: usize, features: usize },
    Missing(PathBuf),
    Mismatch { rows: usize, features: usize },
    Unreadable(String),
}

impl Registry {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reg: Registry =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        reg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(reg)
    }

    pub fn entry(&self, name: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn file_path(&self, entry: &RegistryEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    pub fn resolve(&self, name: &str) -> Result<Dataset> {
        let entry = self.entry(name).ok_or_else(|| {
            let known: Vec<_> = self.entries.iter().map(|e| e.name.as_str()).collect();
            Error::Data(format!(
                "dataset {name:?} is not in the registry (known: {known:?})"
            ))
        })?;
        let path = self.file_path(entry);
        if !path.exists() {
            return Err(Error::Data(format!(
                "dataset {name:?} expected at {}; fetch it first ({})",
                path.display(),
                entry.source
            )));
        }
        let mut data = load_csv(&path, &entry.target, &entry.exclude)?;
        data.name = entry.name.clone();
        Ok(data)
    }

    pub fn check(&self) -> Vec<(String, EntryStatus)> {
        self.entries
            .iter()
            .map(|e| {
                let path = self.file_path(e);
                let status = if !path.exists() {
                    EntryStatus::Missing(path)
                } else {
                    match self.resolve(&e.name) {
                        Ok(d) if d.n_rows() == e.rows && d.n_features() == e.features => {
                            EntryStatus::Ok {
                                rows: d.n_rows(),
                                features: d.n_features(),
                            }
                        }
                        Ok(d) => EntryStatus::Mismatch {
                            rows: d.n_rows(),
                            features: d.n_features(),
                        },
                        Err(err) => EntryStatus::Unreadable(err.to_string()),
                    }
                };
                (e.name.clone(), status)
            })
            .collect()
    }
}
