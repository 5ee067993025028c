//! Comparison models: a random-Fourier-feature GP head on a spectrally
//! normalized extractor, a deep ensemble and a plain softmax network.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{FeatureExtractor, FeatureExtractorConfig, Linear, Mode};
use crate::gpcore::init_lengthscale;
use crate::numcore::{cholesky, linalg, solve_triangular, Graph, JitterPolicy, Tensor, Var};
use crate::rng::{child_seed, substream};
use crate::training::{batch_bounds, OptimizerKind, Optimizer, Result, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetTrainConfig {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl NetTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr() > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Argument(
                "network training needs lr > 0, epochs >= 1 and batch_size >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Minibatch training of an extractor plus extra parameters. `loss` maps
/// (graph, extractor output, extra vars, batch targets) to a scalar mean
/// loss. Returns the mean batch loss per epoch.
fn fit_network<L>(
    extractor: &mut FeatureExtractor,
    extra: &mut [&mut Tensor],
    x: &Tensor,
    y: &Tensor,
    cfg: &NetTrainConfig,
    loss: L,
) -> Result<Vec<f64>>
where
    L: Fn(&mut Graph, Var, &[Var], &Tensor) -> Result<Var>,
{
    cfg.validate()?;
    let n = x.rows();
    if y.rows() != n || n == 0 {
        return Err(TrainError::Argument(format!("{n} inputs but {} targets", y.rows())));
    }
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut shuffle = substream(cfg.seed, "shuffle");
    let mut drop_rng = substream(cfg.seed, "dropout");
    let mut order: Vec<usize> = (0..n).collect();
    let bounds = batch_bounds(n, cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for (b, w) in bounds.windows(2).enumerate() {
            extractor.constrain();
            let idx = &order[w[0]..w[1]];
            let mut g = Graph::new();
            let ev = extractor.bind(&mut g, true);
            let xv: Vec<Var> = extra.iter().map(|t| g.param((**t).clone())).collect();
            let xb = g.constant(x.select_rows(idx));
            let (f, stats) = extractor.forward_graph(&mut g, &ev, xb, Mode::Train, &mut drop_rng)?;
            let l = loss(&mut g, f, &xv, &y.select_rows(idx))?;
            let lv = g.value(l).item();
            if !lv.is_finite() {
                return Err(TrainError::Argument(format!(
                    "non-finite loss {lv} at epoch {epoch}, batch {b}"
                )));
            }
            g.backward(l)?;
            let grads: Vec<Tensor> = ev
                .iter()
                .chain(&xv)
                .map(|&v| {
                    g.grad(v).cloned().unwrap_or_else(|| {
                        let (r, c) = g.shape(v);
                        Tensor::zeros(r, c)
                    })
                })
                .collect();
            let params: Vec<&mut Tensor> = extractor
                .params_mut()
                .into_iter()
                .chain(extra.iter_mut().map(|t| &mut **t))
                .collect();
            opt.step(params, &grads)?;
            extractor.apply_batch_stats(&stats);
            total += lv;
        }
        extractor.constrain_converged();
        history.push(total / (bounds.len() - 1) as f64);
    }
    Ok(history)
}

/// Random Fourier features `φ(x) = √(2s/D)·cos(xΩ + b)` approximating an
/// RBF kernel with length scale `l` and output scale `s`, with a Bayesian
/// linear model on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffModel {
    /// `J×D`; each column is one frequency drawn from `N(0, l⁻²I)`.
    pub frequencies: Tensor,
    /// `1×D`, uniform on `[0, 2π)`.
    pub phases: Tensor,
    pub outputscale: f64,
    pub ridge: f64,
    pub posterior: Option<RffPosterior>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffPosterior {
    pub mean: Tensor,
    /// Cholesky factor of the weight precision `λI + φᵀφ/σ²`.
    pub precision_chol: Tensor,
    pub noise_var: f64,
    /// Targets are modelled as `offset + φ·w`.
    pub offset: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionPrediction {
    pub mean: Vec<f64>,
    /// Variance of the latent function.
    pub latent_var: Vec<f64>,
    pub noise_var: f64,
}

impl RegressionPrediction {
    pub fn total_var(&self) -> Vec<f64> {
        self.latent_var.iter().map(|v| v + self.noise_var).collect()
    }
}

const RFF_CHUNK: usize = 4096;

impl RffModel {
    pub fn new(
        input_dim: usize,
        num_features: usize,
        lengthscale: f64,
        outputscale: f64,
        ridge: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_features == 0 || input_dim == 0 {
            return Err(TrainError::Argument("RFF needs D >= 1 and J >= 1".into()));
        }
        if !(lengthscale > 0.0 && outputscale > 0.0 && ridge > 0.0) {
            return Err(TrainError::Argument(format!(
                "RFF needs positive l, s and λ, got {lengthscale}, {outputscale}, {ridge}"
            )));
        }
        let mut rng = substream(seed, "rff");
        let frequencies = Tensor::from_fn(input_dim, num_features, |_, _| {
            rng.sample::<f64, _>(StandardNormal) / lengthscale
        });
        let phases = Tensor::from_fn(1, num_features, |_, _| rng.gen_range(0.0..std::f64::consts::TAU));
        Ok(Self {
            frequencies,
            phases,
            outputscale,
            ridge,
            posterior: None,
        })
    }

    pub fn num_features(&self) -> usize {
        self.frequencies.cols()
    }

    fn amplitude(&self) -> f64 {
        (2.0 * self.outputscale / self.num_features() as f64).sqrt()
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = x.matmul(&self.frequencies)?;
        let a = self.amplitude();
        let b = self.phases.data();
        for i in 0..z.rows() {
            for (v, p) in z.row_slice_mut(i).iter_mut().zip(b) {
                *v = a * (*v + p).cos();
            }
        }
        Ok(z)
    }

    fn features_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.constant(self.frequencies.clone());
        let b = g.constant(self.phases.clone());
        let xw = g.matmul(x, w)?;
        let z = g.add(xw, b)?;
        let c = g.cos(z);
        Ok(g.scale(c, self.amplitude()))
    }

    /// Exact Bayesian linear regression on precomputed features.
    pub fn fit(&mut self, phi: &Tensor, y: &[f64], noise_var: f64, offset: f64) -> Result<()> {
        if phi.rows() != y.len() || phi.cols() != self.num_features() {
            return Err(TrainError::Argument(format!(
                "features {:?} do not match {} targets and D = {}",
                phi.shape(),
                y.len(),
                self.num_features()
            )));
        }
        let gram = linalg::gemm(phi, true, phi, false)?;
        let resid = Tensor::column(y.iter().map(|v| v - offset).collect());
        let rhs = linalg::gemm(phi, true, &resid, false)?;
        self.finish_fit(gram, rhs, y.len(), noise_var, offset)
    }

    /// [`RffModel::fit`] on the RFF features of `inputs`, accumulating
    /// `φᵀφ` over row chunks in parallel with a fixed summation order.
    pub fn fit_inputs(&mut self, inputs: &Tensor, y: &[f64], noise_var: f64, offset: f64) -> Result<()> {
        self.fit_mapped(inputs, y, noise_var, offset, |x| Ok(x.clone()))
    }

    fn fit_mapped<F>(&mut self, x: &Tensor, y: &[f64], noise_var: f64, offset: f64, map: F) -> Result<()>
    where
        F: Fn(&Tensor) -> Result<Tensor> + Sync,
    {
        let n = x.rows();
        if y.len() != n {
            return Err(TrainError::Argument(format!("{n} inputs but {} targets", y.len())));
        }
        let d = self.num_features();
        let starts: Vec<usize> = (0..n).step_by(RFF_CHUNK).collect();
        let group = rayon::current_num_threads().max(1);
        let mut gram = Tensor::zeros(d, d);
        let mut rhs = Tensor::zeros(d, 1);
        for batch in starts.chunks(group) {
            let parts: Vec<Result<(Tensor, Tensor)>> = batch
                .par_iter()
                .map(|&s| {
                    let e = (s + RFF_CHUNK).min(n);
                    let phi = self.features(&map(&x.slice_rows(s, e))?)?;
                    let r = Tensor::column(y[s..e].iter().map(|v| v - offset).collect());
                    Ok((linalg::gemm(&phi, true, &phi, false)?, linalg::gemm(&phi, true, &r, false)?))
                })
                .collect();
            for p in parts {
                let (gg, rr) = p?;
                gram.add_assign(&gg);
                rhs.add_assign(&rr);
            }
        }
        self.finish_fit(gram, rhs, n, noise_var, offset)
    }

    fn finish_fit(&mut self, gram: Tensor, rhs: Tensor, n: usize, noise_var: f64, offset: f64) -> Result<()> {
        if !(noise_var > 0.0) {
            return Err(TrainError::Argument(format!("noise variance must be > 0, got {noise_var}")));
        }
        let d = self.num_features();
        let inv = 1.0 / noise_var;
        let mut precision = gram.scale(inv);
        for i in 0..d {
            precision.set(i, i, precision.get(i, i) + self.ridge);
        }
        let ch = cholesky(&precision, JitterPolicy::default())?;
        let mean = ch.solve(&rhs.scale(inv))?;
        self.posterior = Some(RffPosterior {
            mean,
            precision_chol: ch.l,
            noise_var,
            offset,
            n,
        });
        Ok(())
    }

    /// Predictive moments at precomputed features; before any fit the
    /// prior `w ~ N(0, λ⁻¹I)` is used.
    pub fn predict_features(&self, phi: &Tensor, prior_noise: f64) -> Result<RegressionPrediction> {
        let n = phi.rows();
        match &self.posterior {
            None => Ok(RegressionPrediction {
                mean: vec![0.0; n],
                latent_var: (0..n)
                    .map(|i| phi.row_slice(i).iter().map(|v| v * v).sum::<f64>() / self.ridge)
                    .collect(),
                noise_var: prior_noise,
            }),
            Some(p) => {
                let mean = phi.matmul(&p.mean)?.col_values(0).iter().map(|v| v + p.offset).collect();
                let v = solve_triangular(&p.precision_chol, &phi.transpose(), true, false)?;
                let mut latent_var = vec![0.0; n];
                for i in 0..v.rows() {
                    for (o, x) in latent_var.iter_mut().zip(v.row_slice(i)) {
                        *o += x * x;
                    }
                }
                Ok(RegressionPrediction {
                    mean,
                    latent_var,
                    noise_var: p.noise_var,
                })
            }
        }
    }
}

/// Spectrally normalized extractor with an RFF output layer, trained end to
/// end on squared error with a ridge penalty; the exact weight posterior is
/// computed on the final features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffRegressor {
    pub extractor: FeatureExtractor,
    pub rff: RffModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RffConfig {
    pub num_features: usize,
    pub ridge: f64,
    pub noise_var: f64,
    pub init_subset_size: usize,
}

impl Default for RffConfig {
    fn default() -> Self {
        Self {
            num_features: 1024,
            ridge: 1.0,
            noise_var: 0.01,
            init_subset_size: 1000,
        }
    }
}

impl RffRegressor {
    pub fn train(
        ext: FeatureExtractorConfig,
        x: &Tensor,
        y: &[f64],
        rff_cfg: &RffConfig,
        cfg: &NetTrainConfig,
    ) -> Result<(Self, Vec<f64>)> {
        let n = x.rows();
        if n < 2 || y.len() != n {
            return Err(TrainError::Argument(format!("need >= 2 points with targets, got {n}")));
        }
        let mut extractor = FeatureExtractor::new(ext, &mut substream(cfg.seed, "extractor"))?;
        extractor.constrain();
        let p = rff_cfg.init_subset_size.clamp(2, n);
        let idx = rand::seq::index::sample(&mut substream(cfg.seed, "init_subset"), n, p).into_vec();
        let l = init_lengthscale(&extractor.features(&x.select_rows(&idx))?)?.value;
        let rff = RffModel::new(
            extractor.feature_dim(),
            rff_cfg.num_features,
            l,
            1.0,
            rff_cfg.ridge,
            child_seed(cfg.seed, "rff", 0),
        )?;
        let mut weights = Tensor::zeros(rff_cfg.num_features, 1);
        let mut bias = Tensor::scalar(y.iter().sum::<f64>() / n as f64);
        let yt = Tensor::column(y.to_vec());
        let inv2 = 1.0 / (2.0 * rff_cfg.noise_var);
        let ridge_per_point = 0.5 * rff_cfg.ridge / n as f64;
        let history = fit_network(
            &mut extractor,
            &mut [&mut weights, &mut bias],
            x,
            &yt,
            cfg,
            |g, f, extra, yb| {
                let phi = rff.features_graph(g, f)?;
                let pw = g.matmul(phi, extra[0])?;
                let pred = g.add(pw, extra[1])?;
                let yv = g.constant(yb.clone());
                let r = g.sub(pred, yv)?;
                let r2 = g.square(r);
                let se = g.sum(r2);
                let fit = g.scale(se, inv2 / yb.rows() as f64);
                let w2 = g.square(extra[0]);
                let ws = g.sum(w2);
                let pen = g.scale(ws, ridge_per_point);
                Ok(g.add(fit, pen)?)
            },
        )?;
        let mut model = Self { extractor, rff };
        let offset = bias.item();
        let ex = &model.extractor;
        let mut rff = model.rff.clone();
        rff.fit_mapped(x, y, rff_cfg.noise_var, offset, |xb| Ok(ex.features(xb)?))?;
        model.rff = rff;
        Ok((model, history))
    }

    pub fn predict(&self, x: &Tensor) -> Result<RegressionPrediction> {
        let phi = self.rff.features(&self.extractor.features(x)?)?;
        let noise = self.rff.posterior.as_ref().map_or(0.0, |p| p.noise_var);
        self.rff.predict_features(&phi, noise)
    }
}

/// Gaussian mixture moments of equally weighted members:
/// `mean = avg μ_k`, `var = avg(σ_k² + μ_k²) − mean²`.
pub fn mixture_moments(means: &[Vec<f64>], vars: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k = means.len() as f64;
    let n = means.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; n];
    let mut second = vec![0.0; n];
    for (m, v) in means.iter().zip(vars) {
        for i in 0..n {
            mean[i] += m[i] / k;
            second[i] += (v[i] + m[i] * m[i]) / k;
        }
    }
    let var = second.iter().zip(&mean).map(|(s, m)| (s - m * m).max(0.0)).collect();
    (mean, var)
}

const MIN_MEMBER_VAR: f64 = 1e-6;

/// Residual network with a two-unit head: mean and softplus variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub extractor: FeatureExtractor,
    pub head: Linear,
}

impl EnsembleMember {
    pub fn predict(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self.extractor.features(x)?;
        let out = f.matmul(&self.head.weight)?;
        let b = self.head.bias.data();
        let mean = (0..out.rows()).map(|i| out.get(i, 0) + b[0]).collect();
        let var = (0..out.rows())
            .map(|i| softplus(out.get(i, 1) + b[1]) + MIN_MEMBER_VAR)
            .collect();
        Ok((mean, var))
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub members: Vec<EnsembleMember>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub member_means: Vec<Vec<f64>>,
    pub member_vars: Vec<Vec<f64>>,
}

impl Ensemble {
    /// Trains `k` members in parallel; member `i` uses the seed
    /// `child_seed(cfg.seed, "member", i)` for its initialization and data
    /// order.
    pub fn train(ext: FeatureExtractorConfig, x: &Tensor, y: &[f64], k: usize, cfg: &NetTrainConfig) -> Result<Self> {
        if k < 2 {
            return Err(TrainError::Argument(format!("an ensemble needs K >= 2, got {k}")));
        }
        let yt = Tensor::column(y.to_vec());
        let members = (0..k as u64)
            .into_par_iter()
            .map(|i| {
                let seed = child_seed(cfg.seed, "member", i);
                let mut init = substream(seed, "extractor");
                let mut extractor = FeatureExtractor::new(ext.clone(), &mut init)?;
                let mut head = Linear::init(ext.feature_dim, 2, &mut init);
                let member_cfg = NetTrainConfig { seed, ..cfg.clone() };
                let Linear { weight, bias, .. } = &mut head;
                fit_network(&mut extractor, &mut [weight, bias], x, &yt, &member_cfg, gaussian_nll_loss)?;
                Ok(EnsembleMember { extractor, head })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { members })
    }

    pub fn predict(&self, x: &Tensor) -> Result<EnsemblePrediction> {
        let preds = self
            .members
            .iter()
            .map(|m| m.predict(x))
            .collect::<Result<Vec<_>>>()?;
        let (member_means, member_vars): (Vec<_>, Vec<_>) = preds.into_iter().unzip();
        let (mean, var) = mixture_moments(&member_means, &member_vars);
        Ok(EnsemblePrediction {
            mean,
            var,
            member_means,
            member_vars,
        })
    }
}

fn gaussian_nll_loss(g: &mut Graph, f: Var, extra: &[Var], yb: &Tensor) -> Result<Var> {
    let fw = g.matmul(f, extra[0])?;
    let out = g.add(fw, extra[1])?;
    let mean = g.slice_cols(out, 0, 1)?;
    let raw = g.slice_cols(out, 1, 2)?;
    let sp = g.softplus(raw);
    let var = g.add_scalar(sp, MIN_MEMBER_VAR);
    let yv = g.constant(yb.clone());
    let r = g.sub(yv, mean)?;
    let r2 = g.square(r);
    let quad = g.div(r2, var)?;
    let lv = g.log(var);
    let both = g.add(lv, quad)?;
    let s = g.sum(both);
    Ok(g.scale(s, 0.5 / yb.rows() as f64))
}

/// Residual network with a linear softmax head, trained on cross-entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxNet {
    pub extractor: FeatureExtractor,
    pub head: Linear,
}

impl SoftmaxNet {
    /// `y` holds one-hot rows.
    pub fn train(ext: FeatureExtractorConfig, x: &Tensor, y: &Tensor, cfg: &NetTrainConfig) -> Result<(Self, Vec<f64>)> {
        let mut init = substream(cfg.seed, "extractor");
        let mut extractor = FeatureExtractor::new(ext.clone(), &mut init)?;
        let mut head = Linear::init(ext.feature_dim, y.cols(), &mut init);
        let Linear { weight, bias, .. } = &mut head;
        let history = fit_network(&mut extractor, &mut [weight, bias], x, y, cfg, |g, f, extra, yb| {
            let fw = g.matmul(f, extra[0])?;
            let logits = g.add(fw, extra[1])?;
            let lsm = g.log_softmax(logits);
            let yv = g.constant(yb.clone());
            let picked = g.mul(lsm, yv)?;
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0 / yb.rows() as f64))
        })?;
        Ok((Self { extractor, head }, history))
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.extractor.features(x)?;
        let mut out = f.matmul(&self.head.weight)?;
        let b = self.head.bias.data().to_vec();
        for i in 0..out.rows() {
            let row = out.row_slice_mut(i);
            for (v, bi) in row.iter_mut().zip(&b) {
                *v += bi;
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - mx).exp());
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
