mod common;

use common::golden_section;
use hetcal::autodiff::Tape;
use hetcal::objectives::{
    gaussian_nll, mse, pinball, quantile_hc_loss, LossWeights, QuantileHcParams, QuantileHeads,
    SigmaGradient, DEFAULT_VARIANCE_FLOOR,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn col(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
}

fn nll_at(y: f64, mu: f64, var: f64) -> f64 {
    let mut t = Tape::new();
    let (y, mu, var) = (
        t.constant(col(&[y])),
        t.constant(col(&[mu])),
        t.constant(col(&[var])),
    );
    let l = gaussian_nll(&mut t, y, mu, var, DEFAULT_VARIANCE_FLOOR).unwrap();
    t.scalar(l)
}

fn pinball_mean(y: &[f64], yhat: f64, tau: f64) -> f64 {
    let mut t = Tape::new();
    let yv = t.constant(col(y));
    let h = t.constant(col(&vec![yhat; y.len()]));
    let l = pinball(&mut t, yv, h, tau).unwrap();
    t.scalar(l)
}

#[test]
fn nll_variance_minimizer_is_squared_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let mu: f64 = rng.random_range(-3.0..3.0);
        let r: f64 = rng.random_range(0.05..4.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let y = mu + r;
        let best = golden_section(|v| nll_at(y, mu, v), 1e-4, 100.0, 1e-10);
        let rel = (best - r * r).abs() / (r * r);
        assert!(rel < 1e-3, "residual {r}: minimizer {best}");
    }
}

#[test]
fn constant_pinball_minimizer_is_the_empirical_quantile() {
    let sample: Vec<f64> = (1..=100).map(f64::from).collect();
    for tau in [0.1, 0.5, 0.9] {
        // Brute-force scan over a fine grid of constant predictors.
        let mut best = (f64::INFINITY, f64::NAN);
        for i in 0..=20_000 {
            let c = i as f64 * 0.005;
            let l = pinball_mean(&sample, c, tau);
            if l < best.0 - 1e-12 {
                best = (l, c);
            }
        }
        // Sorted-sample τ-quantile: the smallest order statistic with
        // at least ⌈τ·n⌉ samples at or below it.
        let k = (tau * 100.0_f64).ceil() as usize;
        let q = sample[k - 1];
        let at_q = pinball_mean(&sample, q, tau);
        assert!(
            (at_q - best.0).abs() < 1e-12,
            "tau {tau}: {at_q} vs {}",
            best.0
        );
        if tau == 0.9 {
            assert_eq!(q, 90.0);
            assert!((best.1 - 90.0).abs() <= 1.0, "{}", best.1);
        }
    }
}

#[test]
fn composite_without_gaussian_term_is_the_pinball_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
    let u: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
    let l: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut t = Tape::new();
    let (yv, uv, lv) = (
        t.constant(col(&y)),
        t.constant(col(&u)),
        t.constant(col(&l)),
    );
    let params = QuantileHcParams {
        tau_u: 0.9,
        tau_l: 0.1,
        weights: LossWeights {
            lambda_h: 0.0,
            lambda_u: 1.0,
            lambda_l: 1.0,
        },
        floor: DEFAULT_VARIANCE_FLOOR,
        sigma_gradient: SigmaGradient::Full,
    };
    let heads = QuantileHeads {
        mu: yv,
        upper: uv,
        lower: lv,
    };
    let (loss, _) = quantile_hc_loss(&mut t, yv, heads, &params).unwrap();
    let pu = pinball(&mut t, yv, uv, 0.9).unwrap();
    let pl = pinball(&mut t, yv, lv, 0.1).unwrap();
    assert_eq!(t.scalar(loss), t.scalar(pu) + t.scalar(pl));
}

#[test]
fn mse_gradient_matches_closed_form() {
    let y = [0.5, -1.0, 2.0, 3.5];
    let m = [0.0, 0.3, 1.0, -2.0];
    let mut t = Tape::new();
    let yv = t.constant(col(&y));
    let mv = t.leaf(col(&m));
    let l = mse(&mut t, yv, mv).unwrap();
    t.backward(l).unwrap();
    for i in 0..4 {
        let expected = 2.0 * (m[i] - y[i]) / 4.0;
        assert!((t.grad(mv)[[i, 0]] - expected).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn pinball_pair_sums_to_absolute_error(y in -50.0f64..50.0, yhat in -50.0f64..50.0, tau in 0.01f64..0.99) {
        let a = pinball_mean(&[y], yhat, tau);
        let b = pinball_mean(&[y], yhat, 1.0 - tau);
        prop_assert!((a + b - (y - yhat).abs()).abs() <= 1e-12 * (1.0 + (y - yhat).abs()));
    }

    #[test]
    fn pinball_and_mse_are_nonnegative(
        y in prop::collection::vec(-10.0f64..10.0, 1..20),
        yhat in -10.0f64..10.0,
        tau in 0.01f64..0.99,
    ) {
        prop_assert!(pinball_mean(&y, yhat, tau) >= 0.0);
        let mut t = Tape::new();
        let yv = t.constant(col(&y));
        let h = t.constant(col(&vec![yhat; y.len()]));
        let l = mse(&mut t, yv, h).unwrap();
        prop_assert!(t.scalar(l) >= 0.0);
    }

    #[test]
    fn nll_is_finite_for_any_nonnegative_variance(y in -1e3f64..1e3, mu in -1e3f64..1e3, var in 0.0f64..1e3) {
        prop_assert!(nll_at(y, mu, var).is_finite());
    }
}
