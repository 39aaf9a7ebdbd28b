//! The four trainers and their prediction rule.
//!
//! | estimator     | head            | training loss                               | σ at prediction            |
//! |---------------|-----------------|---------------------------------------------|----------------------------|
//! | `mc_dropout`  | single          | MSE with dropout active                     | std of M dropout passes    |
//! | `hnn`         | mean + log σ²   | Gaussian NLL, σ² = exp(log σ²)              | exp(½ log σ²)              |
//! | `dropout_hc`  | single          | Gaussian NLL on the MC mean and variance    | std of M dropout passes    |
//! | `quantile_hc` | mean + 2 quant. | λ_H·NLL(σ = half IQR) + pinball(τᵘ) + pinball(τˡ) | half IQR, clamped at 0 |
//!
//! Training works on standardized targets; [`predict`] reports in original units.

use std::time::Instant;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var, VarianceDivisor};
use crate::data::{Standardization, Standardized};
use crate::error::{Error, Result};
use crate::network::{
    Adam, BoundParams, DropoutMask, ForwardMode, Gradients, Head, InitScheme, MlpConfig, MlpModel,
    DEFAULT_HIDDEN_WIDTHS,
};
use crate::objectives::{
    self, floored_fraction, LossWeights, QuantileHcParams, QuantileHeads, SigmaGradient,
    DEFAULT_VARIANCE_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    McDropout,
    Hnn,
    DropoutHc,
    QuantileHc,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::McDropout,
        EstimatorKind::Hnn,
        EstimatorKind::DropoutHc,
        EstimatorKind::QuantileHc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::McDropout => "mc_dropout",
            Self::Hnn => "hnn",
            Self::DropoutHc => "dropout_hc",
            Self::QuantileHc => "quantile_hc",
        }
    }

    pub fn head(self) -> Head {
        match self {
            Self::McDropout | Self::DropoutHc => Head::Single,
            Self::Hnn => Head::MeanLogvar,
            Self::QuantileHc => Head::MeanQuantiles,
        }
    }

    pub fn uses_mc_sampling(self) -> bool {
        matches!(self, Self::McDropout | Self::DropoutHc)
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Dropout passes per mini-batch inside the Dropout-HC objective.
    pub mc_iterations: usize,
    /// Dropout passes when forming prediction intervals.
    pub predict_mc_iterations: usize,
    pub dropout_rate: f64,
    pub tau_u: f64,
    pub tau_l: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub variance_floor: f64,
    pub hidden_widths: Vec<usize>,
    pub init: InitScheme,
    /// Clip the global gradient norm of every mini-batch step.
    pub max_grad_norm: Option<f64>,
    pub variance_divisor: VarianceDivisor,
    pub sigma_gradient: SigmaGradient,
    /// Train HNN and Quantile-HC with dropout active as well.
    pub dropout_in_deterministic_heads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            mc_iterations: 16,
            predict_mc_iterations: 128,
            dropout_rate: 0.2,
            tau_u: 0.9,
            tau_l: 0.1,
            weights: LossWeights::default(),
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            hidden_widths: DEFAULT_HIDDEN_WIDTHS.to_vec(),
            init: InitScheme::default(),
            max_grad_norm: None,
            variance_divisor: VarianceDivisor::Population,
            sigma_gradient: SigmaGradient::Full,
            dropout_in_deterministic_heads: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, kind: EstimatorKind) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return cfg("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return cfg(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(self.variance_floor > 0.0) {
            return cfg(format!(
                "variance floor {} must be positive",
                self.variance_floor
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return cfg(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if let Some(max) = self.max_grad_norm {
            if !(max > 0.0 && max.is_finite()) {
                return cfg(format!("max_grad_norm {max} must be positive"));
            }
        }
        if kind.uses_mc_sampling() {
            if self.dropout_rate <= 0.0 {
                return cfg(format!(
                    "{kind} needs a dropout rate > 0 to produce an uncertainty signal"
                ));
            }
            if self.predict_mc_iterations < 2 {
                return cfg("predict_mc_iterations must be at least 2".into());
            }
        }
        if kind == EstimatorKind::DropoutHc && self.mc_iterations < 2 {
            return cfg(format!(
                "dropout_hc needs mc_iterations >= 2, got {}",
                self.mc_iterations
            ));
        }
        if kind == EstimatorKind::QuantileHc {
            for tau in [self.tau_u, self.tau_l] {
                if !(tau > 0.0 && tau < 1.0) {
                    return cfg(format!("quantile level {tau} outside (0, 1)"));
                }
            }
            if self.tau_l >= self.tau_u {
                return cfg(format!(
                    "tau_l {} must be below tau_u {}",
                    self.tau_l, self.tau_u
                ));
            }
            self.weights.validate()?;
        }
        Ok(())
    }

    fn model_config(&self, kind: EstimatorKind, input_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            hidden_widths: self.hidden_widths.clone(),
            dropout_rate: self.dropout_rate,
            head: kind.head(),
            seed: self.seed,
            init: self.init,
        }
    }

    fn trains_with_dropout(&self, kind: EstimatorKind) -> bool {
        match kind {
            EstimatorKind::McDropout | EstimatorKind::DropoutHc => true,
            EstimatorKind::Hnn | EstimatorKind::QuantileHc => {
                self.dropout_in_deterministic_heads && self.dropout_rate > 0.0
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Share of variances that hit the floor during the epoch.
    pub floored_fraction: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub kind: EstimatorKind,
    pub model: MlpModel,
    pub config: TrainConfig,
    pub log: Vec<EpochRecord>,
}

impl TrainedModel {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

// Independent random streams derived from the run seed.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_TRAIN_DROPOUT: u64 = 2;
const STREAM_PREDICT_DROPOUT: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn column(values: &[f64]) -> Tensor {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

struct BatchLoss {
    loss: Var,
    variance: Option<Var>,
}

fn batch_loss(
    kind: EstimatorKind,
    cfg: &TrainConfig,
    model: &MlpModel,
    tape: &mut Tape,
    params: &BoundParams,
    x: &Tensor,
    y: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLoss> {
    let rows = x.nrows();
    let yv = tape.constant(y.clone());
    let with_dropout = cfg.trains_with_dropout(kind);
    match kind {
        EstimatorKind::DropoutHc => {
            // M passes stacked pass-major: rows g·B..(g+1)·B belong to pass g.
            let m = cfg.mc_iterations;
            let views = vec![x.view(); m];
            let stacked =
                ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
            let mask = DropoutMask::sample(&model.config, rows * m, rng);
            let xv = tape.constant(stacked);
            let out = model.forward(tape, params, xv, ForwardMode::Dropout(&mask))?;
            let mu = tape.group_mean(out, m)?;
            let mut var = tape.group_variance(out, m, cfg.variance_divisor.divisor(m))?;
            if cfg.sigma_gradient == SigmaGradient::Detached {
                var = tape.detach(var);
            }
            let loss = objectives::gaussian_nll(tape, yv, mu, var, cfg.variance_floor)?;
            Ok(BatchLoss {
                loss,
                variance: Some(var),
            })
        }
        _ => {
            let xv = tape.constant(x.clone());
            let mask;
            let mode = if with_dropout {
                mask = DropoutMask::sample(&model.config, rows, rng);
                ForwardMode::Dropout(&mask)
            } else {
                ForwardMode::Deterministic
            };
            let out = model.forward(tape, params, xv, mode)?;
            let mu = tape.column(out, 0)?;
            match kind {
                EstimatorKind::McDropout => Ok(BatchLoss {
                    loss: objectives::mse(tape, yv, mu)?,
                    variance: None,
                }),
                EstimatorKind::Hnn => {
                    let logvar = tape.column(out, 1)?;
                    let var = tape.exp(logvar);
                    let loss = objectives::gaussian_nll(tape, yv, mu, var, cfg.variance_floor)?;
                    Ok(BatchLoss {
                        loss,
                        variance: Some(var),
                    })
                }
                EstimatorKind::QuantileHc => {
                    let heads = QuantileHeads {
                        mu,
                        upper: tape.column(out, 1)?,
                        lower: tape.column(out, 2)?,
                    };
                    let params = QuantileHcParams {
                        tau_u: cfg.tau_u,
                        tau_l: cfg.tau_l,
                        weights: cfg.weights,
                        floor: cfg.variance_floor,
                        sigma_gradient: cfg.sigma_gradient,
                    };
                    let (loss, variance) = objectives::quantile_hc_loss(tape, yv, heads, &params)?;
                    Ok(BatchLoss { loss, variance })
                }
                EstimatorKind::DropoutHc => unreachable!(),
            }
        }
    }
}

/// Mini-batch training objective of `kind` and its gradient with respect to
/// every parameter of `model`. Dropout masks come from `seed`, so two calls
/// with the same seed evaluate the same function.
pub fn objective(
    kind: EstimatorKind,
    cfg: &TrainConfig,
    model: &MlpModel,
    x: &Tensor,
    y: &[f64],
    seed: u64,
) -> Result<(f64, Gradients)> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let mut rng = stream(seed, STREAM_TRAIN_DROPOUT);
    let out = batch_loss(
        kind,
        cfg,
        model,
        &mut tape,
        &params,
        x,
        &column(y),
        &mut rng,
    )?;
    tape.backward(out.loss)?;
    Ok((tape.scalar(out.loss), model.gradients(&tape, &params)))
}

/// Train `kind` on standardized data, calling `on_epoch` after every epoch.
pub fn train_with_log(
    kind: EstimatorKind,
    data: &Standardized,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    cfg.validate(kind)?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut model = MlpModel::init(cfg.model_config(kind, data.x.ncols()))?;
    let mut opt = Adam::new(&model, cfg.learning_rate);
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream(cfg.seed, STREAM_TRAIN_DROPOUT);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut floored = 0usize;
        let mut variances = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let x = data.x.select(Axis(0), batch);
            let y = column(&batch.iter().map(|&i| data.y[i]).collect::<Vec<_>>());
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let out = batch_loss(
                kind,
                cfg,
                &model,
                &mut tape,
                &params,
                &x,
                &y,
                &mut dropout_rng,
            )
            .map_err(|e| match e {
                Error::Domain(reason) => Error::Divergence { epoch, reason },
                other => other,
            })?;
            let loss = tape.scalar(out.loss);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("loss became {loss}"),
                });
            }
            if let Some(v) = out.variance {
                let vals = tape.value(v).as_slice().expect("contiguous").to_vec();
                floored += (floored_fraction(&vals, cfg.variance_floor) * vals.len() as f64).round()
                    as usize;
                variances += vals.len();
            }
            total += loss * batch.len() as f64;
            tape.backward(out.loss)?;
            let mut grads = model.gradients(&tape, &params);
            if let Some(max) = cfg.max_grad_norm {
                grads.clip_global_norm(max);
            }
            opt.step(&mut model, grads, epoch)?;
        }
        let record = EpochRecord {
            epoch,
            loss: total / n as f64,
            floored_fraction: if variances == 0 {
                0.0
            } else {
                floored as f64 / variances as f64
            },
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainedModel {
        kind,
        model,
        config: cfg.clone(),
        log,
    })
}

pub fn train(kind: EstimatorKind, data: &Standardized, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with_log(kind, data, cfg, &mut |_| {})
}

/// Dropout-HC: the MC-dropout mean and variance feed the Gaussian likelihood.
pub fn train_dropout_hc(data: &Standardized, cfg: &TrainConfig) -> Result<TrainedModel> {
    train(EstimatorKind::DropoutHc, data, cfg)
}

/// Quantile-HC: half inter-quantile range as σ in the Gaussian likelihood,
/// plus the two pinball terms.
pub fn train_quantile_hc(data: &Standardized, cfg: &TrainConfig) -> Result<TrainedModel> {
    train(EstimatorKind::QuantileHc, data, cfg)
}

pub fn train_mc_dropout_baseline(data: &Standardized, cfg: &TrainConfig) -> Result<TrainedModel> {
    train(EstimatorKind::McDropout, data, cfg)
}

pub fn train_hnn_baseline(data: &Standardized, cfg: &TrainConfig) -> Result<TrainedModel> {
    train(EstimatorKind::Hnn, data, cfg)
}

/// Per-sample predictive mean, spread and held-out target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub estimator: EstimatorKind,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub y: Vec<f64>,
}

impl PredictionSet {
    pub fn new(
        estimator: EstimatorKind,
        mu: Vec<f64>,
        sigma: Vec<f64>,
        y: Vec<f64>,
    ) -> Result<Self> {
        if mu.len() != sigma.len() || mu.len() != y.len() {
            return Err(Error::Shape(format!(
                "prediction lengths differ: mu {}, sigma {}, y {}",
                mu.len(),
                sigma.len(),
                y.len()
            )));
        }
        if let Some(bad) = sigma.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!(
                "sigma must be finite and >= 0, got {bad}"
            )));
        }
        Ok(Self {
            estimator,
            mu,
            sigma,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Mean and spread in standardized units for every row of `x`.
pub fn predict_standardized(
    model: &MlpModel,
    kind: EstimatorKind,
    x: &Tensor,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if model.config.head != kind.head() {
        return Err(Error::Config(format!(
            "{kind} needs a {:?} head, model has {:?}",
            kind.head(),
            model.config.head
        )));
    }
    match kind {
        EstimatorKind::McDropout | EstimatorKind::DropoutHc => {
            let m = cfg.predict_mc_iterations;
            if m < 2 {
                return Err(Error::Config(
                    "predict_mc_iterations must be at least 2".into(),
                ));
            }
            let mut rng = stream(cfg.seed, STREAM_PREDICT_DROPOUT);
            // Accumulate relative to the first pass: identical passes give σ = 0 exactly.
            let first = {
                let mask = DropoutMask::sample(&model.config, x.nrows(), &mut rng);
                model.predict(x, Some(&mask))?.column(0).to_owned()
            };
            let mut sum = ndarray::Array1::<f64>::zeros(x.nrows());
            let mut sum_sq = ndarray::Array1::<f64>::zeros(x.nrows());
            for _ in 1..m {
                let mask = DropoutMask::sample(&model.config, x.nrows(), &mut rng);
                let out = model.predict(x, Some(&mask))?;
                let d = &out.column(0) - &first;
                sum += &d;
                sum_sq += &(&d * &d);
            }
            let mf = m as f64;
            let shift = sum / mf;
            let var = sum_sq / mf - &shift * &shift;
            let mu = &first + &shift;
            let sigma = var.mapv(|v| v.max(0.0).sqrt());
            Ok((mu.to_vec(), sigma.to_vec()))
        }
        EstimatorKind::Hnn => {
            let out = model.predict(x, None)?;
            let mu = out.column(0).to_vec();
            let sigma = out.column(1).iter().map(|lv| (0.5 * lv).exp()).collect();
            Ok((mu, sigma))
        }
        EstimatorKind::QuantileHc => {
            let out = model.predict(x, None)?;
            let mu = out.column(0).to_vec();
            let sigma = out
                .slice(s![.., 1..3])
                .rows()
                .into_iter()
                .map(|r| ((r[0] - r[1]) / 2.0).max(0.0))
                .collect();
            Ok((mu, sigma))
        }
    }
}

/// Predictions in original target units against raw held-out targets.
pub fn predict(
    trained: &TrainedModel,
    x: &Tensor,
    y_raw: &[f64],
    stats: &Standardization,
) -> Result<PredictionSet> {
    let (mu, sigma) = predict_standardized(&trained.model, trained.kind, x, &trained.config)?;
    PredictionSet::new(
        trained.kind,
        mu.into_iter().map(|m| stats.inverse_target(m)).collect(),
        sigma.into_iter().map(|s| stats.inverse_scale(s)).collect(),
        y_raw.to_vec(),
    )
}

/// Raw quantile-head outputs `(ŷᵘ, ŷˡ)` in standardized units.
pub fn quantile_outputs(model: &MlpModel, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if model.config.head != Head::MeanQuantiles {
        return Err(Error::Config("model has no quantile head".into()));
    }
    let out = model.predict(x, None)?;
    Ok((out.column(1).to_vec(), out.column(2).to_vec()))
}
