use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GpError, KernelKind, KernelSpec, Result};
use crate::numcore::{cholesky, linalg, solve_triangular, Graph, JitterPolicy, Tensor, Var};

/// Lower clamp on predictive latent variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const PREDICT_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Likelihood {
    Gaussian,
    Softmax { mc_samples: usize },
}

/// One independent GP per output dimension. `q_chol_raw` parameterizes the
/// whitened covariance factor: strict lower triangle as is, diagonal
/// through `exp`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputGp {
    pub log_lengthscale: Tensor,
    pub log_outputscale: Tensor,
    pub mean: Tensor,
    pub q_mean: Tensor,
    pub q_chol_raw: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpState {
    pub kind: KernelKind,
    pub likelihood: Likelihood,
    /// Inducing inputs in feature space, shared by all outputs.
    pub z: Tensor,
    pub outputs: Vec<OutputGp>,
    /// `log σ²`; ignored by the softmax likelihood.
    pub log_noise: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    VariationalOnly,
    Nothing,
}

#[derive(Clone, Debug)]
pub struct OutputVars {
    pub log_lengthscale: Var,
    pub log_outputscale: Var,
    pub mean: Var,
    pub q_mean: Var,
    pub q_chol_raw: Var,
}

#[derive(Clone, Debug)]
pub struct GpVars {
    pub z: Var,
    pub outputs: Vec<OutputVars>,
    pub log_noise: Var,
}

impl GpVars {
    /// Same order as [`GpState::params`].
    pub fn flat(&self) -> Vec<Var> {
        let mut v = vec![self.z];
        for o in &self.outputs {
            v.extend([o.log_lengthscale, o.log_outputscale, o.mean, o.q_mean, o.q_chol_raw]);
        }
        v.push(self.log_noise);
        v
    }

    /// Inverse of [`GpVars::flat`].
    pub fn from_flat(vars: &[Var]) -> Result<Self> {
        if vars.len() < 7 || (vars.len() - 2) % 5 != 0 {
            return Err(GpError::Argument(format!("{} vars do not form a GP layout", vars.len())));
        }
        let outputs = vars[1..vars.len() - 1]
            .chunks(5)
            .map(|c| OutputVars {
                log_lengthscale: c[0],
                log_outputscale: c[1],
                mean: c[2],
                q_mean: c[3],
                q_chol_raw: c[4],
            })
            .collect();
        Ok(Self {
            z: vars[0],
            outputs,
            log_noise: vars[vars.len() - 1],
        })
    }
}

impl GpState {
    /// Prior variational state (`m_t = 0`, `S_t = I`), `μ_t = 0`, `s = 1`.
    pub fn new(
        kind: KernelKind,
        likelihood: Likelihood,
        z: Tensor,
        outputs: usize,
        lengthscale: f64,
        noise_var: f64,
    ) -> Result<Self> {
        if outputs == 0 || z.rows() == 0 {
            return Err(GpError::Argument("need at least one output and one inducing point".into()));
        }
        if !(lengthscale > 0.0) || !(noise_var > 0.0) {
            return Err(GpError::Argument(format!(
                "length scale and noise must be positive, got {lengthscale}, {noise_var}"
            )));
        }
        let m = z.rows();
        let outputs = (0..outputs)
            .map(|_| OutputGp {
                log_lengthscale: Tensor::scalar(lengthscale.ln()),
                log_outputscale: Tensor::scalar(0.0),
                mean: Tensor::scalar(0.0),
                q_mean: Tensor::zeros(m, 1),
                q_chol_raw: Tensor::zeros(m, m),
            })
            .collect();
        Ok(Self {
            kind,
            likelihood,
            z,
            outputs,
            log_noise: Tensor::scalar(noise_var.ln()),
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.z.rows()
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise.item().exp()
    }

    pub fn kernel(&self, t: usize) -> KernelSpec {
        let o = &self.outputs[t];
        KernelSpec {
            kind: self.kind,
            lengthscale: o.log_lengthscale.item().exp(),
            outputscale: o.log_outputscale.item().exp(),
            mean: o.mean.item(),
        }
    }

    pub fn q_chol(&self, t: usize) -> Tensor {
        let raw = &self.outputs[t].q_chol_raw;
        Tensor::from_fn(raw.rows(), raw.cols(), |i, j| {
            if j < i {
                raw.get(i, j)
            } else if i == j {
                raw.get(i, i).exp()
            } else {
                0.0
            }
        })
    }

    /// Sets output `t`'s covariance factor from a lower-triangular matrix
    /// with positive diagonal.
    pub fn set_q_chol(&mut self, t: usize, l: &Tensor) {
        self.outputs[t].q_chol_raw = Tensor::from_fn(l.rows(), l.cols(), |i, j| {
            if j < i {
                l.get(i, j)
            } else if i == j {
                l.get(i, i).ln()
            } else {
                0.0
            }
        });
    }

    /// Parameters in canonical order: `Z`, then per output `log l`, `log s`,
    /// `μ`, `m`, raw `L_S`, and finally `log σ²`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.z];
        for o in &self.outputs {
            v.extend([
                &o.log_lengthscale,
                &o.log_outputscale,
                &o.mean,
                &o.q_mean,
                &o.q_chol_raw,
            ]);
        }
        v.push(&self.log_noise);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.z];
        for o in &mut self.outputs {
            v.push(&mut o.log_lengthscale);
            v.push(&mut o.log_outputscale);
            v.push(&mut o.mean);
            v.push(&mut o.q_mean);
            v.push(&mut o.q_chol_raw);
        }
        v.push(&mut self.log_noise);
        v
    }

    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> GpVars {
        let put = |g: &mut Graph, t: &Tensor, train: bool| {
            if train {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let all = trainable == Trainable::All;
        let var = trainable != Trainable::Nothing;
        let z = put(g, &self.z, all);
        let outputs = self
            .outputs
            .iter()
            .map(|o| OutputVars {
                log_lengthscale: put(g, &o.log_lengthscale, all),
                log_outputscale: put(g, &o.log_outputscale, all),
                mean: put(g, &o.mean, all),
                q_mean: put(g, &o.q_mean, var),
                q_chol_raw: put(g, &o.q_chol_raw, var),
            })
            .collect();
        let noise_train = all && self.likelihood == Likelihood::Gaussian;
        let log_noise = put(g, &self.log_noise, noise_train);
        GpVars {
            z,
            outputs,
            log_noise,
        }
    }

    /// Factorizes `K_ZZ` per output for repeated prediction.
    pub fn posterior(&self) -> Result<Posterior> {
        let outputs = (0..self.num_outputs())
            .map(|t| {
                let spec = self.kernel(t);
                let kzz = super::kernel_gram(&spec, &self.z);
                let l = cholesky(&kzz, JitterPolicy::default())?.l;
                Ok(OutputPosterior {
                    spec,
                    l,
                    ls: self.q_chol(t),
                    q_mean: self.outputs[t].q_mean.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Posterior {
            z: self.z.clone(),
            outputs,
            noise_var: self.noise_var(),
        })
    }

    /// Optimal Gaussian-likelihood variational parameters for fixed
    /// hyperparameters: `S = Λ⁻¹`, `m = σ⁻²Λ⁻¹A(y − μ)` with
    /// `Λ = I + σ⁻²AAᵀ` and `A = L⁻¹K_ZX`.
    pub fn fit_variational_gaussian(&mut self, f: &Tensor, y: &Tensor) -> Result<()> {
        if self.likelihood != Likelihood::Gaussian {
            return Err(GpError::Argument("closed-form variational fit needs a Gaussian likelihood".into()));
        }
        let post = self.posterior()?;
        let inv_noise = 1.0 / self.noise_var();
        let m = self.num_inducing();
        for t in 0..self.num_outputs() {
            let o = &post.outputs[t];
            let kzx = super::kernel_eval(&o.spec, &self.z, f)?;
            let a = solve_triangular(&o.l, &kzx, true, false)?;
            let mut lambda = linalg::gemm(&a, false, &a, true)?.scale(inv_noise);
            for i in 0..m {
                lambda.set(i, i, lambda.get(i, i) + 1.0);
            }
            let lam = cholesky(&lambda, JitterPolicy::NONE)?;
            let resid = Tensor::column(y.col_values(t).iter().map(|v| v - o.spec.mean).collect());
            let rhs = a.matmul(&resid)?.scale(inv_noise);
            self.outputs[t].q_mean = lam.solve(&rhs)?;
            // symmetrize Λ⁻¹ before factorizing
            let lam_inv = lam.solve(&Tensor::eye(m))?;
            let sym = Tensor::from_fn(m, m, |i, j| 0.5 * (lam_inv.get(i, j) + lam_inv.get(j, i)));
            let ls = cholesky(&sym, JitterPolicy::default())?.l;
            self.set_q_chol(t, &ls);
        }
        Ok(())
    }
}

/// Latent predictive marginals, plus the observation noise for Gaussian
/// models.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictive {
    pub mean: Tensor,
    pub var: Tensor,
    pub noise_var: f64,
}

struct OutputPosterior {
    spec: KernelSpec,
    l: Tensor,
    ls: Tensor,
    q_mean: Tensor,
}

pub struct Posterior {
    z: Tensor,
    outputs: Vec<OutputPosterior>,
    noise_var: f64,
}

/// Column sums of `a ∘ b`.
fn col_dots(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; a.cols()];
    for i in 0..a.rows() {
        for ((o, x), y) in out.iter_mut().zip(a.row_slice(i)).zip(b.row_slice(i)) {
            *o += x * y;
        }
    }
    out
}

impl Posterior {
    fn project(&self, o: &OutputPosterior, f: &Tensor) -> Result<(Tensor, Tensor)> {
        let kzx = super::kernel_eval(&o.spec, &self.z, f)?;
        let a = solve_triangular(&o.l, &kzx, true, false)?;
        let b = linalg::gemm(&o.ls, true, &a, false)?;
        Ok((a, b))
    }

    fn predict_chunk(&self, f: &Tensor) -> Result<Predictive> {
        let n = f.rows();
        let t_out = self.outputs.len();
        let mut mean = Tensor::zeros(n, t_out);
        let mut var = Tensor::zeros(n, t_out);
        for (t, o) in self.outputs.iter().enumerate() {
            let (a, b) = self.project(o, f)?;
            let mu = linalg::gemm(&a, true, &o.q_mean, false)?;
            let aa = col_dots(&a, &a);
            let bb = col_dots(&b, &b);
            for i in 0..n {
                mean.set(i, t, o.spec.mean + mu.get(i, 0));
                var.set(i, t, (o.spec.outputscale - aa[i] + bb[i]).max(VARIANCE_FLOOR));
            }
        }
        Ok(Predictive {
            mean,
            var,
            noise_var: self.noise_var,
        })
    }

    pub fn predict(&self, f: &Tensor) -> Result<Predictive> {
        if f.rows() <= PREDICT_CHUNK {
            return self.predict_chunk(f);
        }
        let mut mean: Option<Tensor> = None;
        let mut var: Option<Tensor> = None;
        let mut start = 0;
        while start < f.rows() {
            let end = (start + PREDICT_CHUNK).min(f.rows());
            let p = self.predict_chunk(&f.slice_rows(start, end))?;
            mean = Some(match mean {
                None => p.mean,
                Some(m) => m.concat_rows(&p.mean)?,
            });
            var = Some(match var {
                None => p.var,
                Some(v) => v.concat_rows(&p.var)?,
            });
            start = end;
        }
        Ok(Predictive {
            mean: mean.expect("nonempty"),
            var: var.expect("nonempty"),
            noise_var: self.noise_var,
        })
    }

    /// Row-paired latent covariance `cov(f(a_i), f(b_i))` per output,
    /// as an `n×T` tensor.
    pub fn paired_covariance(&self, fa: &Tensor, fb: &Tensor) -> Result<Tensor> {
        if fa.shape() != fb.shape() {
            return Err(GpError::Argument(format!(
                "paired inputs differ in shape: {:?} vs {:?}",
                fa.shape(),
                fb.shape()
            )));
        }
        let n = fa.rows();
        let mut out = Tensor::zeros(n, self.outputs.len());
        for (t, o) in self.outputs.iter().enumerate() {
            let (aa, ba) = self.project(o, fa)?;
            let (ab, bb) = self.project(o, fb)?;
            let prior_part = col_dots(&aa, &ab);
            let post_part = col_dots(&ba, &bb);
            for i in 0..n {
                let d2: f64 = fa
                    .row_slice(i)
                    .iter()
                    .zip(fb.row_slice(i))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                out.set(i, t, o.spec.at_sqdist(d2) - prior_part[i] + post_part[i]);
            }
        }
        Ok(out)
    }
}

pub fn svgp_predict(state: &GpState, f: &Tensor) -> Result<Predictive> {
    state.posterior()?.predict(f)
}

/// Kernel matrix on the graph with log-parameterized `l` and `s`.
pub fn kernel_graph(
    g: &mut Graph,
    kind: KernelKind,
    a: Var,
    b: Var,
    log_l: Var,
    log_s: Var,
) -> Result<Var> {
    let d2 = g.pairwise_sqdist(a, b)?;
    let m2 = g.scale(log_l, -2.0);
    let inv_l2 = g.exp(m2);
    let u = g.mul(d2, inv_l2)?;
    let profile = match kind {
        KernelKind::Rbf => {
            let h = g.scale(u, -0.5);
            g.exp(h)
        }
        KernelKind::Matern32 => g.matern32(u),
    };
    let s = g.exp(log_s);
    Ok(g.mul(profile, s)?)
}

/// Latent predictive mean and variance (`n×T` each) of features `f`.
pub fn latent_graph(g: &mut Graph, kind: KernelKind, vars: &GpVars, f: Var) -> Result<(Var, Var)> {
    let mut means = Vec::new();
    let mut vars_out = Vec::new();
    for o in &vars.outputs {
        let kzz = kernel_graph(g, kind, vars.z, vars.z, o.log_lengthscale, o.log_outputscale)?;
        let l = g.cholesky(kzz)?;
        let kzx = kernel_graph(g, kind, vars.z, f, o.log_lengthscale, o.log_outputscale)?;
        let a = g.triangular_solve(l, kzx, true)?;
        let at = g.transpose(a);
        let am = g.matmul(at, o.q_mean)?;
        means.push(g.add(am, o.mean)?);

        let ls = g.chol_factor(o.q_chol_raw)?;
        let lst = g.transpose(ls);
        let b = g.matmul(lst, a)?;
        let a2 = g.square(a);
        let sa = g.sum_rows(a2);
        let b2 = g.square(b);
        let sb = g.sum_rows(b2);
        let s = g.exp(o.log_outputscale);
        let prior = g.sub(s, sa)?;
        let v = g.add(prior, sb)?;
        let v = g.clamp_min(v, VARIANCE_FLOOR);
        vars_out.push(g.transpose(v));
    }
    let mut mean = means[0];
    let mut var = vars_out[0];
    for t in 1..means.len() {
        mean = g.concat_cols(mean, means[t])?;
        var = g.concat_cols(var, vars_out[t])?;
    }
    Ok((mean, var))
}

/// `Σ_t ½(tr S_t + m_tᵀm_t − m − log|S_t|)` on the graph.
pub fn kl_graph(g: &mut Graph, vars: &GpVars) -> Result<Var> {
    let mut total: Option<Var> = None;
    for o in &vars.outputs {
        let m = g.shape(o.q_mean).0 as f64;
        let ls = g.chol_factor(o.q_chol_raw)?;
        let ls2 = g.square(ls);
        let tr = g.sum(ls2);
        let mm2 = g.square(o.q_mean);
        let mm = g.sum(mm2);
        let d = g.diag(o.q_chol_raw)?;
        let half_logdet = g.sum(d);
        let a = g.add(tr, mm)?;
        let logdet = g.scale(half_logdet, 2.0);
        let b = g.sub(a, logdet)?;
        let c = g.add_scalar(b, -m);
        let kl = g.scale(c, 0.5);
        total = Some(match total {
            None => kl,
            Some(t) => g.add(t, kl)?,
        });
    }
    Ok(total.expect("at least one output"))
}

#[derive(Clone, Copy, Debug)]
pub struct ElboParts {
    pub elbo: Var,
    /// Expected log-likelihood, already scaled by `n_total / batch`.
    pub ell: Var,
    pub kl: Var,
}

/// ELBO of a batch of features. `y` is `n×T`: real targets for the
/// Gaussian likelihood, one-hot rows for softmax. The softmax expectation
/// uses `mc_samples` reparameterized draws from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    state: &GpState,
    vars: &GpVars,
    f: Var,
    y: &Tensor,
    n_total: usize,
    mc_samples: usize,
    rng: &mut R,
) -> Result<ElboParts> {
    let n = g.shape(f).0;
    let t_out = vars.outputs.len();
    if n == 0 {
        return Err(GpError::Argument("empty batch".into()));
    }
    if y.shape() != (n, t_out) {
        return Err(GpError::Argument(format!(
            "targets have shape {:?}, expected ({n}, {t_out})",
            y.shape()
        )));
    }
    let (mean, var) = latent_graph(g, state.kind, vars, f)?;
    let yv = g.constant(y.clone());
    let ell_raw = match state.likelihood {
        Likelihood::Gaussian => {
            let r = g.sub(yv, mean)?;
            let r2 = g.square(r);
            let e = g.add(r2, var)?;
            let se = g.sum(e);
            let noise = g.exp(vars.log_noise);
            let two_noise = g.scale(noise, 2.0);
            let quad = g.div(se, two_noise)?;
            let cnt = (n * t_out) as f64;
            let ln = g.scale(vars.log_noise, -0.5 * cnt);
            let c = g.add_scalar(ln, -0.5 * cnt * (2.0 * std::f64::consts::PI).ln());
            g.sub(c, quad)?
        }
        Likelihood::Softmax { .. } => {
            let samples = mc_samples.max(1);
            let sd = g.sqrt(var);
            let mut acc: Option<Var> = None;
            for _ in 0..samples {
                let eps = Tensor::from_fn(n, t_out, |_, _| rng.sample(StandardNormal));
                let ev = g.constant(eps);
                let noise = g.mul(sd, ev)?;
                let fs = g.add(mean, noise)?;
                let lsm = g.log_softmax(fs);
                let picked = g.mul(lsm, yv)?;
                let s = g.sum(picked);
                acc = Some(match acc {
                    None => s,
                    Some(a) => g.add(a, s)?,
                });
            }
            g.scale(acc.expect("samples >= 1"), 1.0 / samples as f64)
        }
    };
    let ell = g.scale(ell_raw, n_total as f64 / n as f64);
    let kl = kl_graph(g, vars)?;
    let elbo = g.sub(ell, kl)?;
    Ok(ElboParts { elbo, ell, kl })
}

/// ELBO value for fixed features.
pub fn elbo<R: Rng + ?Sized>(
    state: &GpState,
    f: &Tensor,
    y: &Tensor,
    n_total: usize,
    mc_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = state.bind(&mut g, Trainable::Nothing);
    let fv = g.constant(f.clone());
    let parts = elbo_graph(&mut g, state, &vars, fv, y, n_total, mc_samples, rng)?;
    Ok(g.value(parts.elbo).item())
}

pub fn kl_whitened(state: &GpState) -> f64 {
    let mut total = 0.0;
    for (t, o) in state.outputs.iter().enumerate() {
        let m = o.q_mean.rows() as f64;
        let ls = state.q_chol(t);
        let tr = ls.data().iter().map(|v| v * v).sum::<f64>();
        let mm = o.q_mean.data().iter().map(|v| v * v).sum::<f64>();
        let logdet = 2.0 * o.q_chol_raw.diag().iter().sum::<f64>();
        total += 0.5 * (tr + mm - m - logdet);
    }
    total
}

/// Monte Carlo class probabilities from independent latent marginals and
/// the arg-max class of each row.
pub fn predictive_class_probs<R: Rng + ?Sized>(
    pred: &Predictive,
    mc_samples: usize,
    rng: &mut R,
) -> (Tensor, Vec<usize>) {
    let (n, t_out) = pred.mean.shape();
    let samples = mc_samples.max(1);
    let mut probs = Tensor::zeros(n, t_out);
    let mut logits = vec![0.0; t_out];
    for i in 0..n {
        let mu = pred.mean.row_slice(i);
        let sd: Vec<f64> = pred.var.row_slice(i).iter().map(|v| v.sqrt()).collect();
        let row = probs.row_slice_mut(i);
        for _ in 0..samples {
            for c in 0..t_out {
                let e: f64 = rng.sample(StandardNormal);
                logits[c] = mu[c] + sd[c] * e;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for c in 0..t_out {
                row[c] += (logits[c] - mx).exp() / z;
            }
        }
        let inv = 1.0 / samples as f64;
        row.iter_mut().for_each(|p| *p *= inv);
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    let classes = (0..n)
        .map(|i| {
            let r = probs.row_slice(i);
            (0..t_out).fold(0, |best, c| if r[c] > r[best] { c } else { best })
        })
        .collect();
    (probs, classes)
}

/// Row-wise entropy in nats with `0·log 0 = 0`.
pub fn predictive_entropy(probs: &Tensor) -> Vec<f64> {
    (0..probs.rows())
        .map(|i| {
            -probs
                .row_slice(i)
                .iter()
                .filter(|p| **p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        })
        .collect()
}
