//! Training objectives recorded on a [`Tape`].
//!
//! Every loss takes `n×1` column nodes and reduces by the batch mean.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

/// Weights of the Quantile-HC composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub lambda_u: f64,
    pub lambda_l: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_h: 0.75,
            lambda_u: 1.0,
            lambda_l: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_h, self.lambda_u, self.lambda_l];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Whether the Gaussian term's variance receives gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaGradient {
    #[default]
    Full,
    Detached,
}

fn check_finite(tape: &Tape, vars: &[Var], what: &str) -> Result<()> {
    for v in vars {
        if let Some(bad) = tape.value(*v).iter().find(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("{what}: non-finite input {bad}")));
        }
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!(
            "quantile level {tau} outside (0, 1)"
        )));
    }
    Ok(())
}

/// Fraction of entries that sit at or below `floor`.
pub fn floored_fraction(values: &[f64], floor: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v <= floor).count() as f64 / values.len() as f64
}

/// Mean Gaussian negative log-likelihood (without the constant `½ log 2π`),
/// `(y−μ)²/(2s) + ½ log s` with `s = max(σ², floor)`.
pub fn gaussian_nll(tape: &mut Tape, y: Var, mu: Var, sigma_sq: Var, floor: f64) -> Result<Var> {
    if !(floor > 0.0) {
        return Err(Error::Config(format!(
            "variance floor {floor} must be positive"
        )));
    }
    check_finite(tape, &[y, mu, sigma_sq], "gaussian_nll")?;
    let s = tape.clamp_min(sigma_sq, floor);
    let resid = tape.sub(y, mu)?;
    let sq = tape.square(resid);
    let ratio = tape.div(sq, s)?;
    let fit = tape.scale(ratio, 0.5);
    let log_s = tape.log(s)?;
    let spread = tape.scale(log_s, 0.5);
    let per_sample = tape.add(fit, spread)?;
    tape.mean(per_sample)
}

/// Mean pinball loss at level `tau`. Loss and gradient are both zero where
/// `y = ŷ`.
pub fn pinball(tape: &mut Tape, y: Var, y_hat: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    check_finite(tape, &[y, y_hat], "pinball")?;
    let under = tape.sub(y, y_hat)?;
    let over = tape.sub(y_hat, y)?;
    let under = tape.relu(under);
    let over = tape.relu(over);
    let under = tape.scale(under, tau);
    let over = tape.scale(over, 1.0 - tau);
    let per_sample = tape.add(under, over)?;
    tape.mean(per_sample)
}

/// Inputs of the Quantile-HC composite objective.
#[derive(Debug, Clone, Copy)]
pub struct QuantileHeads {
    pub mu: Var,
    pub upper: Var,
    pub lower: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct QuantileHcParams {
    pub tau_u: f64,
    pub tau_l: f64,
    pub weights: LossWeights,
    pub floor: f64,
    pub sigma_gradient: SigmaGradient,
}

/// Quantile-HC loss. The half inter-quantile range is used as σ in the
/// Gaussian term, clamped below at `√floor` so crossed quantiles stay finite.
/// Returns the total loss and the σ² node that entered the Gaussian term.
pub fn quantile_hc_loss(
    tape: &mut Tape,
    y: Var,
    heads: QuantileHeads,
    params: &QuantileHcParams,
) -> Result<(Var, Option<Var>)> {
    check_tau(params.tau_u)?;
    check_tau(params.tau_l)?;
    if params.tau_l >= params.tau_u {
        return Err(Error::Config(format!(
            "lower quantile {} must be below upper quantile {}",
            params.tau_l, params.tau_u
        )));
    }
    params.weights.validate()?;
    let w = params.weights;

    let pin_u = pinball(tape, y, heads.upper, params.tau_u)?;
    let pin_l = pinball(tape, y, heads.lower, params.tau_l)?;
    let pin_u = tape.scale(pin_u, w.lambda_u);
    let pin_l = tape.scale(pin_l, w.lambda_l);
    let quantile_terms = tape.add(pin_u, pin_l)?;
    if w.lambda_h == 0.0 {
        return Ok((quantile_terms, None));
    }

    let width = tape.sub(heads.upper, heads.lower)?;
    let sigma = tape.scale(width, 0.5);
    let sigma = tape.clamp_min(sigma, params.floor.sqrt());
    let mut sigma_sq = tape.square(sigma);
    if params.sigma_gradient == SigmaGradient::Detached {
        sigma_sq = tape.detach(sigma_sq);
    }
    let nll = gaussian_nll(tape, y, heads.mu, sigma_sq, params.floor)?;
    let nll = tape.scale(nll, w.lambda_h);
    Ok((tape.add(nll, quantile_terms)?, Some(sigma_sq)))
}

pub fn mse(tape: &mut Tape, y: Var, mu: Var) -> Result<Var> {
    if tape.value(y).is_empty() {
        return Err(Error::Domain("mse of an empty batch".into()));
    }
    let resid = tape.sub(y, mu)?;
    let sq = tape.square(resid);
    tape.mean(sq)
}
