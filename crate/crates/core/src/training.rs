//! Joint training of the feature extractor and the variational GP.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureExtractor, FeatureExtractorConfig, Mode};
use crate::gpcore::{
    self, elbo, elbo_graph, exact_gp_marginal, init_inducing, init_lengthscale, lemma1_optimum,
    predictive_class_probs, GpError, GpState, GpVars, KernelKind, KernelSpec, Lemma1Result,
    Likelihood, MarginalTerms, Predictive, Trainable,
};
use crate::metrics::{JointLatent, JointRegressor, MetricError};
use crate::numcore::{linalg, Graph, NumError, Tensor};
use crate::rng::{child_seed, substream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
        log: TrainLog,
    },
    #[error("cannot write log: {0}")]
    Io(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::SgdMomentum { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::SgdMomentum { lr, .. } | Self::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer state below this magnitude is set to zero. Moments of
/// parameters whose gradient stays zero otherwise decay into subnormal
/// floats, which slow arithmetic down by orders of magnitude.
const STATE_FLUSH: f64 = 1e-150;

fn flush(v: f64) -> f64 {
    if v.abs() < STATE_FLUSH {
        0.0
    } else {
        v
    }
}

/// First-order optimizer minimizing a loss. Slot state is created on the
/// first step and tied to the parameter shapes seen then.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TrainError::Argument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(TrainError::Argument(format!(
                    "parameter {i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len()
            || self.first.iter().zip(grads).any(|(s, g)| s.shape() != g.shape())
        {
            return Err(TrainError::Argument("parameter layout changed between steps".into()));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { lr, momentum } => {
                for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((w, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = flush(momentum * *vi + gi);
                        *w -= lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((w, gi), mi), vi) in it {
                        *mi = flush(beta1 * *mi + (1.0 - beta1) * gi);
                        *vi = flush(beta2 * *vi + (1.0 - beta2) * gi * gi);
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

fn default_init_subset() -> usize {
    1000
}
fn default_elbo_mc() -> usize {
    8
}
fn default_predict_mc() -> usize {
    32
}
fn default_noise() -> f64 {
    0.01
}
fn default_batch() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_init_subset")]
    pub init_subset_size: usize,
    pub num_inducing: usize,
    pub seed: u64,
    #[serde(default = "default_elbo_mc")]
    pub elbo_mc_samples: usize,
    #[serde(default = "default_predict_mc")]
    pub predict_mc_samples: usize,
    pub kernel: KernelKind,
    #[serde(default = "default_noise")]
    pub noise_var: f64,
    pub task: Task,
    /// Also evaluate the ELBO on the full training set after each epoch.
    #[serde(default)]
    pub full_elbo: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Argument(m));
        if !(self.optimizer.lr() > 0.0) {
            return bad(format!("optimizer.lr must be > 0, got {}", self.optimizer.lr()));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.num_inducing == 0 {
            return bad("num_inducing must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.noise_var > 0.0) {
            return bad(format!("noise_var must be > 0, got {}", self.noise_var));
        }
        Ok(())
    }

    fn likelihood(&self) -> Likelihood {
        match self.task {
            Task::Regression => Likelihood::Gaussian,
            Task::Classification => Likelihood::Softmax {
                mc_samples: self.predict_mc_samples,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over minibatches of the full-data-scaled ELBO estimate.
    pub elbo: f64,
    pub ell: f64,
    pub kl: f64,
    pub full_elbo: Option<f64>,
    pub lengthscales: Vec<f64>,
    pub outputscales: Vec<f64>,
    pub noise_var: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Same log with the wall-clock column zeroed, for run comparisons.
    pub fn without_timing(&self) -> TrainLog {
        let mut l = self.clone();
        l.epochs.iter_mut().for_each(|e| e.wall_time_s = 0.0);
        l
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let outputs = self.epochs.first().map_or(0, |e| e.lengthscales.len());
        let mut header: Vec<String> = ["epoch", "elbo", "ell", "kl", "full_elbo", "noise_var"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for t in 0..outputs {
            header.push(format!("lengthscale_{t}"));
            header.push(format!("outputscale_{t}"));
        }
        header.push("wall_time_s".into());
        w.write_record(&header)?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.elbo.to_string(),
                e.ell.to_string(),
                e.kl.to_string(),
                e.full_elbo.map_or_else(String::new, |v| v.to_string()),
                e.noise_var.to_string(),
            ];
            for t in 0..outputs {
                row.push(e.lengthscales[t].to_string());
                row.push(e.outputscales[t].to_string());
            }
            row.push(e.wall_time_s.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| TrainError::Io(e.into()))?;
        Ok(())
    }
}

/// Feature extractor plus GP head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DueModel {
    pub extractor: FeatureExtractor,
    pub gp: GpState,
}

impl DueModel {
    /// Builds the extractor from the `"extractor"` substream, constrains it
    /// once, and initializes the GP from the features of a random subset of
    /// the training inputs.
    pub fn initialize(ext: FeatureExtractorConfig, x: &Tensor, y: &Tensor, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = x.rows();
        if y.rows() != n {
            return Err(TrainError::Argument(format!("{n} inputs but {} targets", y.rows())));
        }
        if n < cfg.num_inducing.max(2) {
            return Err(TrainError::Argument(format!(
                "dataset of {n} points is too small for {} inducing points",
                cfg.num_inducing
            )));
        }
        let mut extractor = FeatureExtractor::new(ext, &mut substream(cfg.seed, "extractor"))?;
        extractor.constrain();
        let p = cfg.init_subset_size.clamp(cfg.num_inducing.max(2), n);
        let idx: Vec<usize> = if p == n {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut substream(cfg.seed, "init_subset"), n, p).into_vec()
        };
        let f = extractor.features(&x.select_rows(&idx))?;
        let z = init_inducing(&f, cfg.num_inducing, child_seed(cfg.seed, "kmeans", 0))?;
        let l = init_lengthscale(&f)?.value;
        let gp = GpState::new(cfg.kernel, cfg.likelihood(), z, y.cols(), l, cfg.noise_var)?;
        Ok(Self { extractor, gp })
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.extractor.features(x)?)
    }

    /// Latent predictive marginals.
    pub fn predict(&self, x: &Tensor) -> Result<Predictive> {
        let f = self.features(x)?;
        Ok(self.gp.posterior()?.predict(&f)?)
    }

    /// Class probabilities by sampling the latent marginals.
    pub fn predict_proba<R: Rng + ?Sized>(&self, x: &Tensor, mc_samples: usize, rng: &mut R) -> Result<Tensor> {
        let pred = self.predict(x)?;
        Ok(predictive_class_probs(&pred, mc_samples, rng).0)
    }

    pub fn full_elbo<R: Rng + ?Sized>(&self, x: &Tensor, y: &Tensor, mc_samples: usize, rng: &mut R) -> Result<f64> {
        let f = self.features(x)?;
        Ok(elbo(&self.gp, &f, y, x.rows(), mc_samples, rng)?)
    }

    fn record(&self, epoch: usize, sums: [f64; 3], batches: usize) -> EpochRecord {
        let k = batches as f64;
        EpochRecord {
            epoch,
            elbo: sums[0] / k,
            ell: sums[1] / k,
            kl: sums[2] / k,
            full_elbo: None,
            lengthscales: (0..self.gp.num_outputs()).map(|t| self.gp.kernel(t).lengthscale).collect(),
            outputscales: (0..self.gp.num_outputs()).map(|t| self.gp.kernel(t).outputscale).collect(),
            noise_var: self.gp.noise_var(),
            wall_time_s: 0.0,
        }
    }
}

/// Boundaries of `ceil(n / batch_size)` minibatches whose sizes differ by
/// at most one. A short trailing batch would get its likelihood term scaled
/// up by `n / len`, which makes its gradient very noisy.
pub fn batch_bounds(n: usize, batch_size: usize) -> Vec<usize> {
    let k = n.div_ceil(batch_size.max(1)).max(1);
    (0..=k).map(|i| i * n / k).collect()
}

/// Trains every parameter jointly by minimizing `−ELBO / N`.
pub fn train(model: &mut DueModel, x: &Tensor, y: &Tensor, cfg: &TrainConfig) -> Result<TrainLog> {
    train_with_hook(model, x, y, cfg, |_, _| {})
}

/// [`train`] with a callback after every epoch. Each epoch ends with a
/// constraint pass using converged power iteration.
pub fn train_with_hook(
    model: &mut DueModel,
    x: &Tensor,
    y: &Tensor,
    cfg: &TrainConfig,
    mut hook: impl FnMut(&EpochRecord, &DueModel),
) -> Result<TrainLog> {
    cfg.validate()?;
    let n = x.rows();
    if y.shape() != (n, model.gp.num_outputs()) {
        return Err(TrainError::Argument(format!(
            "targets have shape {:?}, expected ({n}, {})",
            y.shape(),
            model.gp.num_outputs()
        )));
    }
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut shuffle = substream(cfg.seed, "shuffle");
    let mut drop_rng = substream(cfg.seed, "dropout");
    let mut mc_rng = substream(cfg.seed, "elbo_mc");
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let bounds = batch_bounds(n, cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle);
        let mut sums = [0.0; 3];
        let mut batches = 0;
        for (b, w) in bounds.windows(2).enumerate() {
            let chunk = &order[w[0]..w[1]];
            model.extractor.constrain();
            let xb = x.select_rows(chunk);
            let yb = y.select_rows(chunk);
            let mut g = Graph::new();
            let ev = model.extractor.bind(&mut g, true);
            let gv: GpVars = model.gp.bind(&mut g, Trainable::All);
            let xv = g.constant(xb);
            let (f, stats) = model.extractor.forward_graph(&mut g, &ev, xv, Mode::Train, &mut drop_rng)?;
            let parts = elbo_graph(&mut g, &model.gp, &gv, f, &yb, n, cfg.elbo_mc_samples, &mut mc_rng)?;
            let loss = g.scale(parts.elbo, -1.0 / n as f64);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    loss: lv,
                    log,
                });
            }
            g.backward(loss)?;
            let vars: Vec<_> = ev.iter().copied().chain(gv.flat()).collect();
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| {
                    g.grad(v).cloned().unwrap_or_else(|| {
                        let (r, c) = g.shape(v);
                        Tensor::zeros(r, c)
                    })
                })
                .collect();
            sums[0] += g.value(parts.elbo).item();
            sums[1] += g.value(parts.ell).item();
            sums[2] += g.value(parts.kl).item();
            batches += 1;
            let DueModel { extractor, gp } = model;
            let params: Vec<&mut Tensor> = extractor.params_mut().into_iter().chain(gp.params_mut()).collect();
            opt.step(params, &grads)?;
            model.extractor.apply_batch_stats(&stats);
        }
        model.extractor.constrain_converged();
        let mut rec = model.record(epoch, sums, batches);
        if cfg.full_elbo {
            let mut r = substream(child_seed(cfg.seed, "full_elbo", epoch as u64), "mc");
            rec.full_elbo = Some(model.full_elbo(x, y, cfg.elbo_mc_samples, &mut r)?);
        }
        rec.wall_time_s = start.elapsed().as_secs_f64();
        hook(&rec, model);
        log.epochs.push(rec);
    }
    Ok(log)
}

impl JointRegressor for DueModel {
    /// `x` excludes the treatment column; it is appended as 0 and 1.
    fn joint_treatment_latent(&self, x: &Tensor) -> std::result::Result<JointLatent, MetricError> {
        if self.gp.likelihood != Likelihood::Gaussian || self.gp.num_outputs() != 1 {
            return Err(MetricError::Contract("CATE needs a single-output regression model".into()));
        }
        let wrap = |e: TrainError| MetricError::Contract(e.to_string());
        let with_t = |t: f64| x.concat_cols(&Tensor::full(x.rows(), 1, t));
        let x0 = with_t(0.0).map_err(|e| MetricError::Argument(e.to_string()))?;
        let x1 = with_t(1.0).map_err(|e| MetricError::Argument(e.to_string()))?;
        let f0 = self.features(&x0).map_err(wrap)?;
        let f1 = self.features(&x1).map_err(wrap)?;
        let post = self.gp.posterior().map_err(|e| MetricError::Contract(e.to_string()))?;
        let p0 = post.predict(&f0).map_err(|e| MetricError::Contract(e.to_string()))?;
        let p1 = post.predict(&f1).map_err(|e| MetricError::Contract(e.to_string()))?;
        let cov = post
            .paired_covariance(&f0, &f1)
            .map_err(|e| MetricError::Contract(e.to_string()))?;
        Ok(JointLatent {
            mean0: p0.mean.col_values(0),
            mean1: p1.mean.col_values(0),
            var0: p0.var.col_values(0),
            var1: p1.var.col_values(0),
            cov: cov.col_values(0),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseProbe {
    /// Marginal likelihood terms under the model's own kernel and noise.
    pub terms: MarginalTerms,
    /// Terms after optimizing the signal scale with the noise ratio fixed.
    pub lemma1: Lemma1Result,
    pub min_pairwise: f64,
    pub mean_pairwise: f64,
    pub max_pairwise: f64,
}

pub const MAX_PROBE: usize = 500;

/// Exact-GP marginal likelihood decomposition and pairwise feature
/// distances on a small probe set, for the first GP output.
pub fn collapse_probe(model: &DueModel, x: &Tensor, y: &[f64]) -> Result<CollapseProbe> {
    if x.rows() < 2 || x.rows() > MAX_PROBE || y.len() != x.rows() {
        return Err(TrainError::Argument(format!(
            "probe needs 2..={MAX_PROBE} rows with matching targets, got {} and {}",
            x.rows(),
            y.len()
        )));
    }
    let f = model.features(x)?;
    let spec = model.gp.kernel(0);
    let noise = model.gp.noise_var();
    let terms = exact_gp_marginal(&spec, &f, y, 1.0, noise.sqrt())?;
    let unit = KernelSpec::new(spec.kind, spec.lengthscale, 1.0)?;
    let centered: Vec<f64> = y.iter().map(|v| v - spec.mean).collect();
    let lemma1 = lemma1_optimum(&gpcore::kernel_gram(&unit, &f), &centered, noise / spec.outputscale)?;
    let d2 = linalg::self_sqdist(&f);
    let p = f.rows();
    let (mut lo, mut hi, mut total) = (f64::INFINITY, 0.0f64, 0.0);
    for i in 0..p {
        for &v in &d2.row_slice(i)[i + 1..] {
            let d = v.max(0.0).sqrt();
            lo = lo.min(d);
            hi = hi.max(d);
            total += d;
        }
    }
    Ok(CollapseProbe {
        terms,
        lemma1,
        min_pairwise: lo,
        mean_pairwise: total / (p * (p - 1) / 2) as f64,
        max_pairwise: hi,
    })
}

#[cfg(test)]
mod tests;
