//! Residual fully connected feature extractor with spectral normalization
//! and optional Lipschitz-constrained batch normalization.
//!
//! Layout: an input linear map (no activation) followed by `depth` blocks.
//! A residual block computes `x + dropout(act(bn(W x + b)))`; the
//! feed-forward variant used as an unconstrained baseline drops the skip.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{power_iteration, power_iteration_converged, Graph, NumError, Tensor, Var};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid feature extractor config: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorConfig {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub depth: usize,
    pub spectral_coeff: f64,
    pub power_iterations: usize,
    pub dropout_rate: f64,
    pub use_batchnorm: bool,
    pub activation: Activation,
    /// Apply spectral normalization (and the batch-norm constraint).
    pub spectral_norm: bool,
    /// Skip connections in the blocks.
    pub residual: bool,
}

impl FeatureExtractorConfig {
    /// Toy configuration: 4 residual blocks of width 128, coefficient 0.95,
    /// one power iteration, ReLU, no batch norm or dropout.
    pub fn toy(input_dim: usize) -> Self {
        Self {
            input_dim,
            feature_dim: 128,
            depth: 4,
            spectral_coeff: 0.95,
            power_iterations: 1,
            dropout_rate: 0.0,
            use_batchnorm: false,
            activation: Activation::Relu,
            spectral_norm: true,
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 {
            return Err(FeatureError::Config("dimensions must be positive".into()));
        }
        if !(self.spectral_coeff > 0.0) {
            return Err(FeatureError::Config(format!(
                "spectral_coeff must be > 0, got {}",
                self.spectral_coeff
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(FeatureError::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.power_iterations == 0 {
            return Err(FeatureError::Config("power_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// `y = x W + b` with `W` stored `in×out`; `u` is the warm-start vector for
/// power iteration (length `in`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    pub u: Vec<f64>,
}

impl Linear {
    /// PyTorch-style init: weights and bias uniform on `±1/√fan_in`.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound));
        let bias = Tensor::from_fn(1, fan_out, |_, _| rng.gen_range(-bound..bound));
        let mut u: Vec<f64> = (0..fan_in).map(|_| rng.sample(StandardNormal)).collect();
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= n);
        Self { weight, bias, u }
    }

    /// Rescales `W ← W·min(1, c/σ̂)` using `iters` warm-started power
    /// iterations. Returns the σ estimate before rescaling.
    pub fn spectral_normalize(&mut self, coeff: f64, iters: usize) -> f64 {
        let sigma = power_iteration(&self.weight, &mut self.u, iters);
        if sigma > coeff {
            let f = coeff / sigma;
            self.weight.map_inplace(|w| w * f);
        }
        sigma
    }

    /// Like [`Linear::spectral_normalize`] with power iteration run to
    /// convergence.
    pub fn spectral_normalize_converged(&mut self, coeff: f64) -> f64 {
        let (sigma, _) = power_iteration_converged(&self.weight, &mut self.u, 1e-7, 2_000);
        if sigma > coeff {
            let f = coeff / sigma;
            self.weight.map_inplace(|w| w * f);
        }
        sigma
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight on the history in `running ← m·running + (1−m)·batch`.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(1, channels),
            beta: Tensor::zeros(1, channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.99,
            eps: 1e-5,
        }
    }

    /// `max_i |γ_i| / √(running_var_i + ε)` — the Lipschitz constant of the
    /// deployed (eval-mode) layer.
    pub fn lipschitz(&self) -> f64 {
        self.gamma
            .data()
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g.abs() / (v + self.eps).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn update_running(&mut self, batch_mean: &[f64], batch_var_unbiased: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(batch_var_unbiased) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Scales `γ` so the layer's Lipschitz constant is at most `coeff`.
pub fn batchnorm_constrain(bn: &mut BatchNormState, coeff: f64) {
    let l = bn.lipschitz();
    if l > coeff {
        let f = coeff / l;
        bn.gamma.map_inplace(|g| g * f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub linear: Linear,
    pub bn: Option<BatchNormState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub config: FeatureExtractorConfig,
    pub input: Linear,
    pub blocks: Vec<Block>,
}

/// Batch statistics observed by batch-norm layers during a train-mode pass.
#[derive(Clone, Debug, Default)]
pub struct BatchStats {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzReport {
    pub input_sigma: f64,
    pub block_sigmas: Vec<f64>,
    pub batchnorm_lipschitz: Vec<Option<f64>>,
    /// `1 + σ·L_bn` for residual blocks, `σ·L_bn` otherwise.
    pub block_bounds: Vec<f64>,
    /// Product of the input-map σ and all block bounds.
    pub network_bound: f64,
}

/// Inverted dropout on a plain tensor.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, rng: &mut R, mode: Mode) -> Tensor {
    if mode == Mode::Eval || rate == 0.0 {
        return x.clone();
    }
    let keep = 1.0 / (1.0 - rate);
    x.map(|v| if rng.gen::<f64>() < rate { 0.0 } else { v * keep })
}

fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    Tensor::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < rate { 0.0 } else { keep })
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(config: FeatureExtractorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let input = Linear::init(config.input_dim, config.feature_dim, rng);
        let blocks = (0..config.depth)
            .map(|_| Block {
                linear: Linear::init(config.feature_dim, config.feature_dim, rng),
                bn: config
                    .use_batchnorm
                    .then(|| BatchNormState::new(config.feature_dim)),
            })
            .collect();
        Ok(Self {
            config,
            input,
            blocks,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Trainable tensors in canonical order: input W, b, then per block
    /// W, b and (with batch norm) γ, β.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.input.weight, &self.input.bias];
        for b in &self.blocks {
            v.push(&b.linear.weight);
            v.push(&b.linear.bias);
            if let Some(bn) = &b.bn {
                v.push(&bn.gamma);
                v.push(&bn.beta);
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.input.weight, &mut self.input.bias];
        for b in &mut self.blocks {
            v.push(&mut b.linear.weight);
            v.push(&mut b.linear.bias);
            if let Some(bn) = &mut b.bn {
                v.push(&mut bn.gamma);
                v.push(&mut bn.beta);
            }
        }
        v
    }

    /// Places the parameters on `g` in canonical order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Builds the forward pass on `g` from parameters bound with [`bind`].
    ///
    /// [`bind`]: FeatureExtractor::bind
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, BatchStats)> {
        let (n, d) = g.shape(x);
        if d != self.config.input_dim {
            return Err(NumError::Dimension {
                op: "feature_forward",
                detail: format!("input has {d} columns, extractor expects {}", self.config.input_dim),
            }
            .into());
        }
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter list matches extractor layout");
        let w = next();
        let b = next();
        let xw = g.matmul(x, w)?;
        let mut h = g.add(xw, b)?;
        let mut stats = BatchStats::default();
        for block in &self.blocks {
            let w = next();
            let b = next();
            let hw = g.matmul(h, w)?;
            let mut z = g.add(hw, b)?;
            if let Some(bn) = &block.bn {
                let gamma = next();
                let beta = next();
                z = match mode {
                    Mode::Train => {
                        let inv_n = 1.0 / n as f64;
                        let s = g.sum_rows(z);
                        let mean = g.scale(s, inv_n);
                        let centered = g.sub(z, mean)?;
                        let sq = g.square(centered);
                        let ss = g.sum_rows(sq);
                        let var = g.scale(ss, inv_n);
                        let var_eps = g.add_scalar(var, bn.eps);
                        let sd = g.sqrt(var_eps);
                        let normed = g.div(centered, sd)?;
                        let scaled = g.mul(normed, gamma)?;
                        let bias_corr = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                        stats.layers.push((
                            g.value(mean).data().to_vec(),
                            g.value(var).data().iter().map(|v| v * bias_corr).collect(),
                        ));
                        g.add(scaled, beta)?
                    }
                    Mode::Eval => {
                        let rm = g.constant(Tensor::row(bn.running_mean.clone()));
                        let rsd = g.constant(Tensor::row(
                            bn.running_var.iter().map(|v| (v + bn.eps).sqrt()).collect(),
                        ));
                        let centered = g.sub(z, rm)?;
                        let normed = g.div(centered, rsd)?;
                        let scaled = g.mul(normed, gamma)?;
                        g.add(scaled, beta)?
                    }
                };
            }
            let mut a = match self.config.activation {
                Activation::Relu => g.relu(z),
                Activation::Elu => g.elu(z, 1.0),
            };
            if mode == Mode::Train && self.config.dropout_rate > 0.0 {
                let (r, c) = g.shape(a);
                let mask = g.constant(dropout_mask(r, c, self.config.dropout_rate, rng));
                a = g.mul(a, mask)?;
            }
            h = if self.config.residual { g.add(h, a)? } else { a };
        }
        Ok((h, stats))
    }

    /// Forward pass on plain tensors.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (out, _) = self.forward_graph(&mut g, &p, xv, mode, rng)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode forward; a pure function of parameters and input.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        // eval mode never draws from the rng
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        self.forward(x, Mode::Eval, &mut rng)
    }

    pub fn apply_batch_stats(&mut self, stats: &BatchStats) {
        let mut layers = stats.layers.iter();
        for b in &mut self.blocks {
            if let Some(bn) = &mut b.bn {
                if let Some((m, v)) = layers.next() {
                    bn.update_running(m, v);
                }
            }
        }
    }

    /// Spectral normalization of every linear map with coefficient `coeff`,
    /// plus the batch-norm constraint when batch norm is enabled.
    pub fn spectral_normalize(&mut self, coeff: f64, iters: usize) {
        self.input.spectral_normalize(coeff, iters);
        for b in &mut self.blocks {
            b.linear.spectral_normalize(coeff, iters);
            if let Some(bn) = &mut b.bn {
                batchnorm_constrain(bn, coeff);
            }
        }
    }

    /// Applies the configured constraint, if any, with the configured
    /// number of power iterations.
    pub fn constrain(&mut self) {
        if self.config.spectral_norm {
            let (c, it) = (self.config.spectral_coeff, self.config.power_iterations);
            self.spectral_normalize(c, it);
        }
    }

    /// [`FeatureExtractor::constrain`] with converged singular value
    /// estimates, so the bound holds for the true spectral norms.
    pub fn constrain_converged(&mut self) {
        if !self.config.spectral_norm {
            return;
        }
        let c = self.config.spectral_coeff;
        self.input.spectral_normalize_converged(c);
        for b in &mut self.blocks {
            b.linear.spectral_normalize_converged(c);
            if let Some(bn) = &mut b.bn {
                batchnorm_constrain(bn, c);
            }
        }
    }

    /// Per-layer Lipschitz upper bounds with σ from power iteration run to
    /// 1e-6 relative stationarity.
    pub fn lipschitz_audit(&self) -> LipschitzReport {
        let sigma = |l: &Linear| {
            let mut u = l.u.clone();
            power_iteration_converged(&l.weight, &mut u, 1e-6, 20_000).0
        };
        let input_sigma = sigma(&self.input);
        let mut block_sigmas = Vec::new();
        let mut batchnorm_lipschitz = Vec::new();
        let mut block_bounds = Vec::new();
        for b in &self.blocks {
            let s = sigma(&b.linear);
            let lbn = b.bn.as_ref().map(BatchNormState::lipschitz);
            let inner = s * lbn.unwrap_or(1.0);
            block_bounds.push(if self.config.residual { 1.0 + inner } else { inner });
            block_sigmas.push(s);
            batchnorm_lipschitz.push(lbn);
        }
        let network_bound = block_bounds.iter().product::<f64>() * input_sigma;
        LipschitzReport {
            input_sigma,
            block_sigmas,
            batchnorm_lipschitz,
            block_bounds,
            network_bound,
        }
    }
}
