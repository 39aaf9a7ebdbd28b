//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use hetcal::estimators::{self, EstimatorKind, TrainConfig};
use hetcal::network::{Head, MlpConfig, MlpModel};
use hetcal::objectives::LossWeights;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Objective variants checked by the finite-difference oracle.
#[derive(Debug, Clone, Copy)]
pub enum Objective {
    /// MSE through a dropout forward pass.
    Mse,
    /// Gaussian NLL with σ² = exp(logvar).
    HnnNll,
    /// Gaussian NLL on the Monte-Carlo mean and variance of M dropout passes.
    DropoutHc,
    /// NLL on the inter-quantile σ plus both pinball terms.
    QuantileHc,
    /// Pinball terms alone (λ_H = 0).
    Pinball,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Mse,
        Objective::HnnNll,
        Objective::DropoutHc,
        Objective::QuantileHc,
        Objective::Pinball,
    ];

    fn setup(self) -> (EstimatorKind, TrainConfig) {
        let mut cfg = TrainConfig {
            mc_iterations: 6,
            dropout_rate: 0.2,
            ..TrainConfig::default()
        };
        let kind = match self {
            Objective::Mse => EstimatorKind::McDropout,
            Objective::HnnNll => EstimatorKind::Hnn,
            Objective::DropoutHc => EstimatorKind::DropoutHc,
            Objective::QuantileHc => EstimatorKind::QuantileHc,
            Objective::Pinball => {
                cfg.weights = LossWeights {
                    lambda_h: 0.0,
                    ..LossWeights::default()
                };
                EstimatorKind::QuantileHc
            }
        };
        (kind, cfg)
    }
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// Largest per-coordinate relative error between the taped gradient of the
/// objective and central differences, over a random five-hidden-layer net.
///
/// Relative error is `|g − fd| / max(|g|, |fd|, floor)` with
/// `floor = 1e4·ε·max(1, |L|)/h`: below it the round-off of the central
/// difference alone (about `ε·|L|/h`) would exceed a relative error of 1e-4.
pub fn max_gradient_error(objective: Objective, seed: u64) -> f64 {
    let (kind, cfg) = objective.setup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = rng.random_range(1..=4);
    let hidden_widths: Vec<usize> = (0..5).map(|_| rng.random_range(3..=7)).collect();
    let rows = rng.random_range(4..=9);
    let head = match kind {
        EstimatorKind::Hnn => Head::MeanLogvar,
        EstimatorKind::QuantileHc => Head::MeanQuantiles,
        _ => Head::Single,
    };
    let mut model = MlpModel::init(MlpConfig {
        input_dim,
        hidden_widths,
        dropout_rate: cfg.dropout_rate,
        head,
        seed,
        init: cfg.init,
    })
    .unwrap();
    for layer in &mut model.layers {
        layer.bias = 0.1 * normal_matrix(&mut rng, 1, layer.bias.ncols());
    }
    let x = normal_matrix(&mut rng, rows, input_dim);
    if head == Head::MeanQuantiles {
        // Keep every quantile pair ordered with a clear gap so σ² stays off
        // the variance floor, where the objective is not differentiable.
        loop {
            let (u, l) = estimators::quantile_outputs(&model, &x).unwrap();
            if u.iter().zip(&l).all(|(u, l)| u - l > 1.0) {
                break;
            }
            let last = model.layers.last_mut().unwrap();
            last.bias[[0, 1]] += 1.0;
            last.bias[[0, 2]] -= 1.0;
        }
    }
    // Targets drawn from the network's own predictive law keep r²/σ² of
    // order one; far out in the tails the loss reaches 1e4..1e7 and the
    // central difference drowns in round-off.
    let (mu, sigma) = estimators::predict_standardized(&model, kind, &x, &cfg).unwrap();
    let y: Vec<f64> = mu
        .iter()
        .zip(&sigma)
        .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    // A row whose dropout passes all agree puts σ² on the variance floor: a
    // kink where the loss jumps to ~1e6. Such mask draws are redrawn.
    let (mask_seed, loss, grads) = loop {
        let mask_seed = rng.random();
        let (loss, grads) = estimators::objective(kind, &cfg, &model, &x, &y, mask_seed).unwrap();
        if loss.abs() < 1e3 {
            break (mask_seed, loss, grads);
        }
    };
    let h = 1e-6;
    let floor = 1e4 * f64::EPSILON * loss.abs().max(1.0) / h;
    let mut worst = 0.0f64;
    for li in 0..model.layers.len() {
        for which in 0..2 {
            let n = if which == 0 {
                model.layers[li].weight.len()
            } else {
                model.layers[li].bias.len()
            };
            for k in 0..n {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    let t = if which == 0 {
                        &mut m.layers[li].weight
                    } else {
                        &mut m.layers[li].bias
                    };
                    t.as_slice_mut().unwrap()[k] += delta;
                    estimators::objective(kind, &cfg, &m, &x, &y, mask_seed)
                        .unwrap()
                        .0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let g = if which == 0 {
                    grads.0[li].0.as_slice().unwrap()[k]
                } else {
                    grads.0[li].1.as_slice().unwrap()[k]
                };
                let err = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
                worst = worst.max(err);
            }
        }
    }
    worst
}

/// Standard-normal CDF from the Maclaurin series of erf (no shared code with
/// the library's rational approximation). Accurate for |x| ≲ 5.
pub fn normal_cdf_series(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    let mut term = z;
    let mut sum = z;
    let mut n = 0.0;
    while term.abs() > 1e-18 * sum.abs().max(1e-300) {
        n += 1.0;
        term *= -z * z / n;
        sum += term / (2.0 * n + 1.0);
        if n > 500.0 {
            break;
        }
    }
    0.5 * (1.0 + 2.0 / std::f64::consts::PI.sqrt() * sum)
}

/// Φ⁻¹(p) by bisection on [`normal_cdf_series`].
pub fn inverse_cdf_bisection(p: f64) -> f64 {
    let (mut lo, mut hi) = (-6.0, 6.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf_series(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Minimizer of a unimodal function on `[a, b]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    while (b - a).abs() > tol * (a.abs() + b.abs()).max(1e-12) {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    0.5 * (a + b)
}
