//! Kernels, the whitened inducing-point variational GP and an exact GP used
//! as a reference.

mod exact;
mod svgp;

pub use exact::{
    coincidence_path, exact_gp_marginal, exact_gp_predict, gaussian_marginal_terms,
    golden_section_max, lemma1_optimum, Lemma1Result, MarginalTerms, PathStep,
};
pub use svgp::{
    elbo, elbo_graph, kernel_graph, kl_graph, kl_whitened, latent_graph, predictive_class_probs,
    predictive_entropy, svgp_predict, ElboParts, GpState, GpVars, Likelihood, OutputGp,
    OutputVars, Posterior, Predictive, Trainable, VARIANCE_FLOOR,
};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{kmeans, linalg, NumError, Tensor};

#[derive(Debug, Error)]
pub enum GpError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, GpError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    Matern32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub lengthscale: f64,
    pub outputscale: f64,
    pub mean: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, lengthscale: f64, outputscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) || !(outputscale > 0.0) {
            return Err(GpError::Argument(format!(
                "kernel needs positive length and output scale, got l={lengthscale}, s={outputscale}"
            )));
        }
        Ok(Self {
            kind,
            lengthscale,
            outputscale,
            mean: 0.0,
        })
    }

    /// Kernel value at squared distance `d2`.
    pub fn at_sqdist(&self, d2: f64) -> f64 {
        let u = d2 / (self.lengthscale * self.lengthscale);
        self.outputscale
            * match self.kind {
                KernelKind::Rbf => (-0.5 * u).exp(),
                KernelKind::Matern32 => crate::numcore::graph::matern32_profile(u),
            }
    }
}

/// Cross-covariance matrix `k(a_i, b_j)`.
pub fn kernel_eval(spec: &KernelSpec, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d2 = linalg::pairwise_sqdist(a, b)?;
    Ok(d2.map(|v| spec.at_sqdist(v)))
}

/// Gram matrix of `a` with itself; the diagonal is exactly `s`.
pub fn kernel_gram(spec: &KernelSpec, a: &Tensor) -> Tensor {
    linalg::self_sqdist(a).map(|v| spec.at_sqdist(v))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LengthscaleInit {
    pub value: f64,
    /// All points coincide; `value` is the fallback 1.
    pub degenerate: bool,
}

/// Mean Euclidean distance over all unordered pairs of rows.
pub fn init_lengthscale(features: &Tensor) -> Result<LengthscaleInit> {
    let p = features.rows();
    if p < 2 {
        return Err(GpError::Argument(format!(
            "length scale init needs at least 2 points, got {p}"
        )));
    }
    let d2 = linalg::self_sqdist(features);
    let mut total = 0.0;
    for i in 0..p {
        let row = d2.row_slice(i);
        total += row[i + 1..].iter().map(|v| v.sqrt()).sum::<f64>();
    }
    let mean = total / (p * (p - 1) / 2) as f64;
    if mean > 0.0 {
        Ok(LengthscaleInit {
            value: mean,
            degenerate: false,
        })
    } else {
        Ok(LengthscaleInit {
            value: 1.0,
            degenerate: true,
        })
    }
}

/// k-means centroids of the features; with `m == p` the points themselves.
pub fn init_inducing(features: &Tensor, m: usize, seed: u64) -> Result<Tensor> {
    let p = features.rows();
    if m == 0 || p < m {
        return Err(GpError::Argument(format!(
            "need 1 <= m <= p inducing points, got m={m}, p={p}"
        )));
    }
    if m == p {
        return Ok(features.clone());
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok(kmeans(features, m, &mut rng)?.centroids)
}

#[cfg(test)]
mod tests;
