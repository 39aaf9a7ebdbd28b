//! Fully connected ReLU regression network with inverted dropout after every
//! hidden activation, plus the Adam optimizer and a JSON checkpoint format.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN_WIDTHS: [usize; 5] = [64; 5];

/// Output head of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// `μ`
    Single,
    /// `(μ, log σ²)`
    MeanLogvar,
    /// `(μ, ŷᵘ, ŷˡ)`
    MeanQuantiles,
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Single => 1,
            Head::MeanLogvar => 2,
            Head::MeanQuantiles => 3,
        }
    }
}

/// Weight initialization; biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `U(−√(6/fan_in), √(6/fan_in))`: keeps the activation scale through ReLU layers.
    #[default]
    HeUniform,
    /// `U(−√(1/fan_in), √(1/fan_in))`.
    FanInUniform,
}

impl InitScheme {
    pub fn bound(self, fan_in: usize) -> f64 {
        match self {
            InitScheme::HeUniform => (6.0 / fan_in as f64).sqrt(),
            InitScheme::FanInUniform => (1.0 / fan_in as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub head: Head,
    pub seed: u64,
    #[serde(default)]
    pub init: InitScheme,
}

impl MlpConfig {
    pub fn new(input_dim: usize, head: Head) -> Self {
        Self {
            input_dim,
            hidden_widths: DEFAULT_HIDDEN_WIDTHS.to_vec(),
            dropout_rate: 0.0,
            head,
            seed: 0,
            init: InitScheme::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_widths);
        widths.push(self.head.outputs());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Weight stored `fan_in × fan_out` so that a batch forward is `x · W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub layers: Vec<Layer>,
}

/// Per-hidden-layer keep masks with entries `0` or `1/(1−p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Tensor>,
    pub keep_scale: f64,
}

impl DropoutMask {
    /// Fresh Bernoulli(1−p) mask for a batch of `rows` inputs.
    pub fn sample<R: Rng + ?Sized>(config: &MlpConfig, rows: usize, rng: &mut R) -> Self {
        let p = config.dropout_rate;
        let keep_scale = 1.0 / (1.0 - p);
        let layers = config
            .hidden_widths
            .iter()
            .map(|&w| {
                Array2::from_shape_simple_fn((rows, w), || {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep_scale
                    }
                })
            })
            .collect();
        Self { layers, keep_scale }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    Deterministic,
    Dropout(&'a DropoutMask),
}

/// Model parameters registered as leaves on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<(Var, Var)>,
}

/// Gradients in layer order, `(weight, bias)` per layer.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<(Tensor, Tensor)>);

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.0
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let k = max_norm / norm;
            for (w, b) in &mut self.0 {
                *w *= k;
                *b *= k;
            }
        }
        norm
    }
}

impl MlpModel {
    pub fn init(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = config.init.bound(fan_in);
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Layer {
                    weight: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                        dist.sample(&mut rng)
                    }),
                    bias: Tensor::zeros((1, fan_out)),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        BoundParams { vars }
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input width {width} does not match model input_dim {}",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &DropoutMask, rows: usize) -> Result<()> {
        let ok = mask.layers.len() == self.config.hidden_widths.len()
            && mask
                .layers
                .iter()
                .zip(&self.config.hidden_widths)
                .all(|(m, &w)| m.dim() == (rows, w));
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "dropout mask does not fit a batch of {rows} rows"
            )))
        }
    }

    /// Recorded forward pass; returns a `rows × head.outputs()` node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: Var,
        mode: ForwardMode<'_>,
    ) -> Result<Var> {
        let (rows, width) = tape.value(x).dim();
        self.check_input(width)?;
        if let ForwardMode::Dropout(mask) = mode {
            self.check_mask(mask, rows)?;
        }
        let last = params.vars.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in params.vars.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last {
                h = tape.relu(h);
                if let ForwardMode::Dropout(mask) = mode {
                    let m = tape.constant(mask.layers[i].clone());
                    h = tape.mul(h, m)?;
                }
            }
        }
        Ok(h)
    }

    /// Untaped forward pass; bit-identical to [`MlpModel::forward`].
    pub fn predict(&self, x: &Tensor, mask: Option<&DropoutMask>) -> Result<Tensor> {
        self.check_input(x.ncols())?;
        if let Some(mask) = mask {
            self.check_mask(mask, x.nrows())?;
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = &h.dot(&layer.weight) + &layer.bias;
            if i < last {
                h.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
                if let Some(mask) = mask {
                    h = &h * &mask.layers[i];
                }
            }
        }
        Ok(h)
    }

    pub fn gradients(&self, tape: &Tape, params: &BoundParams) -> Gradients {
        Gradients(
            params
                .vars
                .iter()
                .map(|&(w, b)| (tape.grad(w).clone(), tape.grad(b).clone()))
                .collect(),
        )
    }

    /// All parameters flattened in layer order (weight row-major, then bias).
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::from_model(self);
        let text = serde_json::to_string(&ckpt)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.into_model()
    }
}

pub const CHECKPOINT_FORMAT: &str = "hetcal-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model: config echo plus one flat array per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: MlpConfig,
    pub layers: Vec<FlatLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &MlpModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            layers: model
                .layers
                .iter()
                .map(|l| FlatLayer {
                    fan_in: l.weight.nrows(),
                    fan_out: l.weight.ncols(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<MlpModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        self.config.validate()?;
        let dims = self.config.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::Shape("checkpoint layer count mismatch".into()));
        }
        let layers = self
            .layers
            .into_iter()
            .zip(dims)
            .map(|(l, (fan_in, fan_out))| {
                if (l.fan_in, l.fan_out) != (fan_in, fan_out) {
                    return Err(Error::Shape("checkpoint layer shape mismatch".into()));
                }
                let weight = Array2::from_shape_vec((fan_in, fan_out), l.weight)
                    .map_err(|e| Error::Shape(e.to_string()))?;
                let bias = Array2::from_shape_vec((1, fan_out), l.bias)
                    .map_err(|e| Error::Shape(e.to_string()))?;
                Ok(Layer { weight, bias })
            })
            .collect::<Result<_>>()?;
        Ok(MlpModel {
            config: self.config,
            layers,
        })
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<(Tensor, Tensor)>,
    second: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(model: &MlpModel, learning_rate: f64) -> Self {
        let zeros: Vec<_> = model
            .layers
            .iter()
            .map(|l| {
                (
                    Tensor::zeros(l.weight.raw_dim()),
                    Tensor::zeros(l.bias.raw_dim()),
                )
            })
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` is consumed, leaving nothing to zero.
    pub fn step(&mut self, model: &mut MlpModel, grads: Gradients, epoch: usize) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: "non-finite gradient".into(),
            });
        }
        if grads.0.len() != model.layers.len() {
            return Err(Error::Shape("gradient count does not match layers".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (lr, eps) = (self.learning_rate, self.eps);

        for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in model
            .layers
            .iter_mut()
            .zip(grads.0)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for (param, g, m, v) in [
                (&mut layer.weight, gw, mw, vw),
                (&mut layer.bias, gb, mb, vb),
            ] {
                ndarray::Zip::from(param)
                    .and(&g)
                    .and(m)
                    .and(v)
                    .for_each(|p, &g, m, v| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    });
            }
        }
        if !model.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: "non-finite parameters after update".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_config(head: Head) -> MlpConfig {
        MlpConfig {
            input_dim: 3,
            hidden_widths: vec![4, 5],
            dropout_rate: 0.2,
            head,
            seed: 7,
            init: InitScheme::default(),
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MlpModel::init(small_config(Head::Single)).unwrap();
        let b = MlpModel::init(small_config(Head::Single)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn biases_start_at_zero() {
        let m = MlpModel::init(MlpConfig::new(6, Head::MeanLogvar)).unwrap();
        assert!(m.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn weights_stay_inside_fan_in_bound() {
        for (init, k) in [
            (InitScheme::HeUniform, 6.0),
            (InitScheme::FanInUniform, 1.0),
        ] {
            let mut cfg = MlpConfig::new(13, Head::Single);
            cfg.init = init;
            let m = MlpModel::init(cfg).unwrap();
            for l in &m.layers {
                let bound = (k / l.weight.nrows() as f64).sqrt();
                assert!(l.weight.iter().all(|w| w.abs() <= bound));
                assert!(l.weight.iter().any(|w| w.abs() > 0.9 * bound));
            }
        }
    }

    #[test]
    fn weight_sample_mean_is_zero() {
        // 100×100 first layer = 10⁴ draws from U[−b, b].
        let mut cfg = MlpConfig::new(100, Head::Single);
        cfg.hidden_widths = vec![100];
        let b = cfg.init.bound(100);
        let m = MlpModel::init(cfg).unwrap();
        let w = &m.layers[0].weight;
        let n = w.len() as f64;
        let se = b / 3f64.sqrt() / n.sqrt();
        assert!(w.mean().unwrap().abs() < 3.0 * se);
    }

    #[test]
    fn invalid_configs() {
        assert!(MlpModel::init(MlpConfig::new(0, Head::Single)).is_err());
        let mut cfg = MlpConfig::new(2, Head::Single);
        cfg.dropout_rate = 1.0;
        assert!(matches!(MlpModel::init(cfg.clone()), Err(Error::Config(_))));
        cfg.dropout_rate = 0.1;
        cfg.hidden_widths = vec![3, 0];
        assert!(matches!(MlpModel::init(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn head_widths() {
        for (head, k) in [
            (Head::Single, 1),
            (Head::MeanLogvar, 2),
            (Head::MeanQuantiles, 3),
        ] {
            let m = MlpModel::init(small_config(head)).unwrap();
            let out = m.predict(&Tensor::ones((4, 3)), None).unwrap();
            assert_eq!(out.dim(), (4, k));
        }
    }

    #[test]
    fn zero_dropout_mask_is_identity() {
        let mut cfg = small_config(Head::Single);
        cfg.dropout_rate = 0.0;
        let m = MlpModel::init(cfg.clone()).unwrap();
        let x = array![[0.1, -0.2, 0.3], [1.0, 2.0, -1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = DropoutMask::sample(&cfg, 2, &mut rng);
        assert_eq!(
            m.predict(&x, Some(&mask)).unwrap(),
            m.predict(&x, None).unwrap()
        );
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut m = MlpModel::init(small_config(Head::MeanQuantiles)).unwrap();
        for l in &mut m.layers {
            l.weight.fill(0.0);
        }
        let x = array![[5.0, -3.0, 2.0]];
        assert!(m.predict(&x, None).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taped_forward_matches_plain_forward() {
        let cfg = small_config(Head::MeanQuantiles);
        let m = MlpModel::init(cfg.clone()).unwrap();
        let x = array![[0.5, -1.0, 2.0], [0.0, 0.3, -0.7]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = DropoutMask::sample(&cfg, 2, &mut rng);
        for mode in [ForwardMode::Deterministic, ForwardMode::Dropout(&mask)] {
            let mut tape = Tape::new();
            let params = m.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let out = m.forward(&mut tape, &params, xv, mode).unwrap();
            let plain = match mode {
                ForwardMode::Deterministic => m.predict(&x, None),
                ForwardMode::Dropout(mask) => m.predict(&x, Some(mask)),
            }
            .unwrap();
            assert_eq!(tape.value(out), &plain);
        }
        let mut tape = Tape::new();
        let params = m.bind(&mut tape);
        let a = tape.constant(x.clone());
        let o1 = m
            .forward(&mut tape, &params, a, ForwardMode::Dropout(&mask))
            .unwrap();
        let o2 = m
            .forward(&mut tape, &params, a, ForwardMode::Dropout(&mask))
            .unwrap();
        assert_eq!(tape.value(o1), tape.value(o2));
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let m = MlpModel::init(small_config(Head::Single)).unwrap();
        assert!(matches!(
            m.predict(&Tensor::zeros((2, 4)), None),
            Err(Error::Shape(_))
        ));
    }

    fn scalar_model(w: f64) -> MlpModel {
        MlpModel {
            config: MlpConfig {
                input_dim: 1,
                hidden_widths: vec![],
                dropout_rate: 0.0,
                head: Head::Single,
                seed: 0,
                init: InitScheme::default(),
            },
            layers: vec![Layer {
                weight: array![[w]],
                bias: array![[0.0]],
            }],
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut m = MlpModel::init(small_config(Head::Single)).unwrap();
        let before = m.clone();
        let mut opt = Adam::new(&m, 1e-3);
        let zeros = Gradients(
            m.layers
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.weight.raw_dim()),
                        Tensor::zeros(l.bias.raw_dim()),
                    )
                })
                .collect(),
        );
        opt.step(&mut m, zeros, 0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // t=1: m̂ = g, v̂ = g², so Δ = lr·g/(|g| + ε) ≈ lr.
        let mut m = scalar_model(1.0);
        let mut opt = Adam::new(&m, 0.1);
        let g = Gradients(vec![(array![[1.0]], array![[0.0]])]);
        opt.step(&mut m, g, 0).unwrap();
        let delta = 1.0 - m.layers[0].weight[[0, 0]];
        assert!((delta - 0.1).abs() < 1e-8, "{delta}");
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut m = scalar_model(3.0);
        let mut opt = Adam::new(&m, 0.02);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let w = m.layers[0].weight[[0, 0]];
            let loss = w * w;
            assert!(loss < prev);
            prev = loss;
            opt.step(
                &mut m,
                Gradients(vec![(array![[2.0 * w]], array![[0.0]])]),
                0,
            )
            .unwrap();
        }
        assert!(prev < 2.0, "{prev}");
    }

    #[test]
    fn nan_gradient_reports_epoch() {
        let mut m = scalar_model(1.0);
        let mut opt = Adam::new(&m, 0.1);
        let g = Gradients(vec![(array![[f64::NAN]], array![[0.0]])]);
        match opt.step(&mut m, g, 17) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 17),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = Gradients(vec![(array![[3.0]], array![[4.0]])]);
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert!((g.0[0].0[[0, 0]] - 0.6).abs() < 1e-12);
        let mut small = Gradients(vec![(array![[0.3]], array![[0.4]])]);
        small.clip_global_norm(1.0);
        assert_eq!(small.0[0].1[[0, 0]], 0.4);
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let cfg = small_config(Head::MeanLogvar);
        let m = MlpModel::init(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let back = MlpModel::load(&path).unwrap();
        assert_eq!(m, back);
        let x = array![[0.3, 0.1, -2.0]];
        assert_eq!(
            m.predict(&x, None).unwrap(),
            back.predict(&x, None).unwrap()
        );
    }
}
