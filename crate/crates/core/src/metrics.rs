//! Interval construction, calibration error, calibration curves and RMSE.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::PredictionSet;

pub const DEFAULT_LEVELS: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 0.9, 0.99];

// Acklam's rational approximation of the inverse standard-normal CDF.
const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];
const P_LOW: f64 = 0.02425;

/// Φ⁻¹(p): rational approximation refined by one Halley step.
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("probability {p} outside (0, 1)")));
    }
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    Ok(x - u / (1.0 + x * u / 2.0))
}

/// Two-sided multiplier `Φ⁻¹((1+α)/2)` for a central α-level interval.
pub fn z_score(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!(
            "calibration level {alpha} outside (0, 1)"
        )));
    }
    inverse_normal_cdf((1.0 + alpha) / 2.0)
}

/// `[μ − zσ, μ + zσ]`.
pub fn build_interval(mu: f64, sigma: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("negative sigma {sigma}")));
    }
    let half = z_score(alpha)? * sigma;
    Ok((mu - half, mu + half))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CalibrationLevelSet {
    levels: Vec<f64>,
}

impl CalibrationLevelSet {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("empty calibration level set".into()));
        }
        if levels.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config(format!(
                "levels must lie in (0, 1): {levels:?}"
            )));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "levels must be strictly increasing: {levels:?}"
            )));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

impl Default for CalibrationLevelSet {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS.to_vec(),
        }
    }
}

impl TryFrom<Vec<f64>> for CalibrationLevelSet {
    type Error = Error;

    fn try_from(levels: Vec<f64>) -> Result<Self> {
        Self::new(levels)
    }
}

impl From<CalibrationLevelSet> for Vec<f64> {
    fn from(set: CalibrationLevelSet) -> Self {
        set.levels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub expected: f64,
    pub achieved: f64,
}

/// Expected vs achieved coverage, one row per level.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub points: Vec<CurvePoint>,
}

impl CalibrationCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("expected,achieved\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{}", p.expected, p.achieved);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Fraction of samples whose target lies in the closed α-level interval.
pub fn coverage(preds: &PredictionSet, alpha: f64) -> Result<f64> {
    let z = z_score(alpha)?;
    let hits = preds
        .mu
        .iter()
        .zip(&preds.sigma)
        .zip(&preds.y)
        .filter(|((&mu, &sigma), &y)| {
            let half = z * sigma;
            mu - half <= y && y <= mu + half
        })
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `Σ_α |α − coverage(α)|`, unnormalized, with the per-level curve.
pub fn calibration_error(
    preds: &PredictionSet,
    levels: &CalibrationLevelSet,
) -> Result<(f64, CalibrationCurve)> {
    if preds.is_empty() {
        return Err(Error::Domain(
            "calibration error of an empty prediction set".into(),
        ));
    }
    let mut ce = 0.0;
    let mut points = Vec::with_capacity(levels.len());
    for &alpha in levels.levels() {
        let achieved = coverage(preds, alpha)?;
        ce += (alpha - achieved).abs();
        points.push(CurvePoint {
            expected: alpha,
            achieved,
        });
    }
    Ok((ce, CalibrationCurve { points }))
}

pub fn rmse(preds: &PredictionSet) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Domain("rmse of an empty prediction set".into()));
    }
    let sse: f64 = preds
        .mu
        .iter()
        .zip(&preds.y)
        .map(|(m, y)| (y - m) * (y - m))
        .sum();
    Ok((sse / preds.len() as f64).sqrt())
}
