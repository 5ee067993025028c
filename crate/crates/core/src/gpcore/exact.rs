use super::{kernel_eval, kernel_gram, GpError, KernelSpec, Result};
use crate::numcore::{cholesky, linalg, Cholesky, JitterPolicy, NumError, Tensor};

/// Terms of `log N(y | 0, σ_f·K + σ_n²·I)`:
/// `log_marginal = data_fit − complexity − (n/2)·log 2π` with
/// `complexity = ½·log|σ_f·K + σ_n²·I|` and `data_fit = −½·yᵀ(σ_f·K + σ_n²·I)⁻¹y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalTerms {
    pub log_marginal: f64,
    pub data_fit: f64,
    pub complexity: f64,
}

fn factor(c: &Tensor) -> Result<Cholesky> {
    match cholesky(c, JitterPolicy::NONE) {
        Ok(ch) => Ok(ch),
        Err(NumError::Decomposition { .. }) => Ok(cholesky(c, JitterPolicy::default())?),
        Err(e) => Err(e.into()),
    }
}

/// Marginal likelihood terms for a precomputed gram matrix and centered
/// targets. No jitter is added unless the plain factorization fails.
pub fn gaussian_marginal_terms(
    gram: &Tensor,
    y: &[f64],
    sigma_f: f64,
    sigma_n: f64,
) -> Result<MarginalTerms> {
    let n = gram.rows();
    if gram.cols() != n || y.len() != n {
        return Err(GpError::Argument(format!(
            "gram {:?} does not match {} targets",
            gram.shape(),
            y.len()
        )));
    }
    let noise = sigma_n * sigma_n;
    let c = Tensor::from_fn(n, n, |i, j| {
        sigma_f * gram.get(i, j) + if i == j { noise } else { 0.0 }
    });
    let ch = factor(&c)?;
    let alpha = linalg::solve_triangular(&ch.l, &Tensor::column(y.to_vec()), true, false)?;
    let data_fit = -0.5 * alpha.data().iter().map(|v| v * v).sum::<f64>();
    let complexity = 0.5 * ch.logdet();
    let log_marginal =
        data_fit - complexity - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(MarginalTerms {
        log_marginal,
        data_fit,
        complexity,
    })
}

/// Exact log marginal likelihood of `y` under mean `spec.mean` and
/// covariance `σ_f·k(F, F) + σ_n²·I`.
pub fn exact_gp_marginal(
    spec: &KernelSpec,
    features: &Tensor,
    y: &[f64],
    sigma_f: f64,
    sigma_n: f64,
) -> Result<MarginalTerms> {
    let gram = kernel_gram(spec, features);
    let centered: Vec<f64> = y.iter().map(|v| v - spec.mean).collect();
    gaussian_marginal_terms(&gram, &centered, sigma_f, sigma_n)
}

/// Closed-form GP regression posterior: latent mean and marginal variance
/// at `test`.
pub fn exact_gp_predict(
    spec: &KernelSpec,
    train: &Tensor,
    y: &[f64],
    noise_var: f64,
    test: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = train.rows();
    if y.len() != n {
        return Err(GpError::Argument(format!("{} targets for {n} points", y.len())));
    }
    let mut c = kernel_gram(spec, train);
    for i in 0..n {
        c.set(i, i, c.get(i, i) + noise_var);
    }
    let ch = factor(&c)?;
    let kxs = kernel_eval(spec, train, test)?;
    let resid = Tensor::column(y.iter().map(|v| v - spec.mean).collect());
    let alpha = ch.solve(&resid)?;
    let v = linalg::solve_triangular(&ch.l, &kxs, true, false)?;
    let mut mean = vec![spec.mean; test.rows()];
    let mut var = vec![spec.outputscale; test.rows()];
    for i in 0..n {
        let a = alpha.get(i, 0);
        for (j, (mu, s)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
            *mu += kxs.get(i, j) * a;
            *s -= v.get(i, j) * v.get(i, j);
        }
    }
    var.iter_mut().for_each(|s| *s = s.max(0.0));
    Ok((mean, var))
}

/// Golden-section search for the maximum of a unimodal function on
/// `[lo, hi]`; returns the arg-max.
pub fn golden_section_max(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lemma1Result {
    pub sigma_f: f64,
    pub sigma_n: f64,
    pub terms: MarginalTerms,
}

/// Maximizes the marginal likelihood over `σ_f` with the noise tied to it
/// through a fixed ratio, `σ_n² = noise_ratio·σ_f`.
pub fn lemma1_optimum(gram: &Tensor, y: &[f64], noise_ratio: f64) -> Result<Lemma1Result> {
    if !(noise_ratio > 0.0) {
        return Err(GpError::Argument(format!("noise ratio must be > 0, got {noise_ratio}")));
    }
    let eval = |log_sf: f64| {
        let sf = log_sf.exp();
        gaussian_marginal_terms(gram, y, sf, (noise_ratio * sf).sqrt())
    };
    eval(0.0)?;
    let best = golden_section_max(
        |x| eval(x).map(|t| t.log_marginal).unwrap_or(f64::NEG_INFINITY),
        -30.0,
        30.0,
        1e-12,
    );
    let sigma_f = best.exp();
    Ok(Lemma1Result {
        sigma_f,
        sigma_n: (noise_ratio * sigma_f).sqrt(),
        terms: eval(best)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathStep {
    pub t: f64,
    pub distance: f64,
    pub sigma_n: f64,
    pub terms: MarginalTerms,
}

/// Moves feature row `j` linearly onto row `i` in `steps` steps and, at
/// each configuration, re-optimizes `σ_n` within `sigma_n_bounds`.
pub fn coincidence_path(
    spec: &KernelSpec,
    features: &Tensor,
    y: &[f64],
    (i, j): (usize, usize),
    steps: usize,
    sigma_f: f64,
    sigma_n_bounds: (f64, f64),
) -> Result<Vec<PathStep>> {
    if i == j || i >= features.rows() || j >= features.rows() || steps == 0 {
        return Err(GpError::Argument(format!(
            "invalid path: rows ({i}, {j}) of {}, {steps} steps",
            features.rows()
        )));
    }
    let (lo, hi) = sigma_n_bounds;
    if !(lo > 0.0 && hi > lo) {
        return Err(GpError::Argument(format!("bad noise bounds ({lo}, {hi})")));
    }
    let xi = features.row_slice(i).to_vec();
    let xj = features.row_slice(j).to_vec();
    (0..=steps)
        .map(|k| {
            let t = k as f64 / steps as f64;
            let mut f = features.clone();
            let row = f.row_slice_mut(j);
            for ((r, a), b) in row.iter_mut().zip(&xi).zip(&xj) {
                *r = (1.0 - t) * b + t * a;
            }
            let distance = (1.0 - t) * xi.iter().zip(&xj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let eval = |log_sn: f64| exact_gp_marginal(spec, &f, y, sigma_f, log_sn.exp());
            let best = golden_section_max(
                |x| eval(x).map(|m| m.log_marginal).unwrap_or(f64::NEG_INFINITY),
                lo.ln(),
                hi.ln(),
                1e-10,
            );
            Ok(PathStep {
                t,
                distance,
                sigma_n: best.exp(),
                terms: eval(best)?,
            })
        })
        .collect()
}
