//! Accuracy and uncertainty metrics, treatment-effect estimation and
//! deferral, and feature-collapse diagnostics.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gpcore::{init_lengthscale, kernel_gram, KernelKind, KernelSpec};
use crate::numcore::{cholesky, linalg, JitterPolicy, Tensor};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{0}")]
    Argument(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(MetricError::Length(a, b))
    }
}

/// Probability that a random out-of-distribution score exceeds a random
/// in-distribution score, ties counted one half.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(MetricError::Argument("auroc needs two nonempty score sets".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, false))
        .chain(scores_out.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks over tie groups
    let mut rank_sum_out = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_out += all[i..=j].iter().filter(|e| e.1).count() as f64 * mid;
        i = j + 1;
    }
    let (n, m) = (scores_in.len() as f64, scores_out.len() as f64);
    Ok((rank_sum_out - m * (m + 1.0) / 2.0) / (n * m))
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    same_len(probs.rows(), labels.len())?;
    if bins == 0 {
        return Err(MetricError::Argument("ece needs at least one bin".into()));
    }
    let n = probs.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (i, &label) in labels.iter().enumerate() {
        let row = probs.row_slice(i);
        let pred = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        let conf = row[pred];
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == label {
            correct[b] += 1;
        }
    }
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n as f64) * (correct[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len(pred.len(), target.len())?;
    if pred.is_empty() {
        return Err(MetricError::Argument("rmse of an empty set".into()));
    }
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// Mean Gaussian negative log-likelihood.
pub fn gaussian_nll(mean: &[f64], var: &[f64], target: &[f64]) -> Result<f64> {
    same_len(mean.len(), target.len())?;
    same_len(var.len(), target.len())?;
    if mean.is_empty() {
        return Err(MetricError::Argument("nll of an empty set".into()));
    }
    let s: f64 = mean
        .iter()
        .zip(var)
        .zip(target)
        .map(|((m, v), y)| 0.5 * (2.0 * std::f64::consts::PI * v).ln() + (y - m).powi(2) / (2.0 * v))
        .sum();
    Ok(s / mean.len() as f64)
}

/// Mean categorical negative log-likelihood of the true labels.
pub fn class_nll(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    same_len(probs.rows(), labels.len())?;
    if labels.is_empty() {
        return Err(MetricError::Argument("nll of an empty set".into()));
    }
    let s: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| -probs.get(i, c).max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(s / labels.len() as f64)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    same_len(predicted.len(), labels.len())?;
    if labels.is_empty() {
        return Err(MetricError::Argument("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Latent posterior of the untreated (`0`) and treated (`1`) outcome of each
/// row, including their covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLatent {
    pub mean0: Vec<f64>,
    pub mean1: Vec<f64>,
    pub var0: Vec<f64>,
    pub var1: Vec<f64>,
    pub cov: Vec<f64>,
}

/// Models that can predict both potential outcomes of an input jointly.
pub trait JointRegressor {
    fn joint_treatment_latent(&self, x: &Tensor) -> Result<JointLatent>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CateEstimate {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub mc_samples: usize,
}

/// CATE mean from the posterior means and its variance by sampling the
/// 2×2 joint posterior of each row.
pub fn cate_from_joint<R: Rng + ?Sized>(joint: &JointLatent, mc_samples: usize, rng: &mut R) -> CateEstimate {
    let n = joint.mean0.len();
    let s = mc_samples.max(2);
    let mut variance = Vec::with_capacity(n);
    for i in 0..n {
        let l11 = joint.var0[i].max(0.0).sqrt();
        let l21 = if l11 > 0.0 { joint.cov[i] / l11 } else { 0.0 };
        let l22 = (joint.var1[i] - l21 * l21).max(0.0).sqrt();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..s {
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            let diff = (l21 - l11) * e0 + l22 * e1;
            sum += diff;
            sum2 += diff * diff;
        }
        let m = sum / s as f64;
        variance.push(((sum2 - s as f64 * m * m) / (s - 1) as f64).max(0.0));
    }
    CateEstimate {
        mean: joint.mean1.iter().zip(&joint.mean0).map(|(a, b)| a - b).collect(),
        variance,
        mc_samples: s,
    }
}

pub fn cate_estimate<M: JointRegressor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &Tensor,
    mc_samples: usize,
    rng: &mut R,
) -> Result<CateEstimate> {
    let joint = model.joint_treatment_latent(x)?;
    Ok(cate_from_joint(&joint, mc_samples, rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeferralPolicy {
    Random,
    Uncertainty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeferralResult {
    pub rate: f64,
    pub retained: usize,
    pub rmse: f64,
    pub policy: DeferralPolicy,
    pub seed: u64,
}

/// Defers a fraction `rate` of rows to an expert and reports the RMSE of
/// `estimates` against `truth` on the rows kept. The uncertainty policy
/// defers the most uncertain rows (ties broken by row index).
pub fn deferral_curve(
    estimates: &[f64],
    truth: &[f64],
    uncertainties: &[f64],
    rate: f64,
    policy: DeferralPolicy,
    seed: u64,
) -> Result<DeferralResult> {
    same_len(estimates.len(), truth.len())?;
    same_len(estimates.len(), uncertainties.len())?;
    if !(0.0..1.0).contains(&rate) {
        return Err(MetricError::Argument(format!("deferral rate must be in [0, 1), got {rate}")));
    }
    let n = estimates.len();
    let retained = ((1.0 - rate) * n as f64).round() as usize;
    let keep: Vec<usize> = match policy {
        DeferralPolicy::Uncertainty => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]).then(a.cmp(&b)));
            order.truncate(retained);
            order
        }
        DeferralPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, n, retained).into_vec()
        }
    };
    let e: Vec<f64> = keep.iter().map(|&i| estimates[i]).collect();
    let t: Vec<f64> = keep.iter().map(|&i| truth[i]).collect();
    Ok(DeferralResult {
        rate,
        retained,
        rmse: if keep.is_empty() { 0.0 } else { rmse(&e, &t)? },
        policy,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// Median over out-of-distribution points of feature-space over
    /// input-space distance to the nearest in-distribution point.
    pub contraction_ratio: f64,
    /// The same ratio with both spaces rescaled by their in-distribution
    /// scatter.
    pub normalized_contraction_ratio: f64,
    pub star_distance: Option<f64>,
    /// Star distance divided by the in-distribution feature scatter.
    pub star_distance_normalized: Option<f64>,
    /// Log-determinant of a unit RBF gram on pooled features, or `-inf`
    /// when it is numerically singular.
    pub gram_logdet: f64,
    pub feature_scatter: f64,
    pub input_scatter: f64,
}

/// Root mean squared distance of rows to their centroid.
pub fn scatter(x: &Tensor) -> f64 {
    let n = x.rows().max(1) as f64;
    let mut c = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (a, v) in c.iter_mut().zip(x.row_slice(i)) {
            *a += v / n;
        }
    }
    let ss: f64 = (0..x.rows())
        .map(|i| x.row_slice(i).iter().zip(&c).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
        .sum();
    (ss / n).sqrt()
}

fn nearest_dist(query: &Tensor, reference: &Tensor) -> Result<Vec<f64>> {
    let d2 = linalg::pairwise_sqdist(query, reference).map_err(|e| MetricError::Argument(e.to_string()))?;
    Ok((0..d2.rows())
        .map(|i| d2.row_slice(i).iter().cloned().fold(f64::INFINITY, f64::min).sqrt())
        .collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const GRAM_ROWS: usize = 512;

pub fn collapse_metrics(
    features_in: &Tensor,
    features_ood: &Tensor,
    inputs_in: &Tensor,
    inputs_ood: &Tensor,
    star: Option<usize>,
) -> Result<CollapseReport> {
    if features_in.rows() == 0 || features_ood.rows() == 0 {
        return Err(MetricError::Argument("collapse metrics need nonempty sets".into()));
    }
    same_len(features_in.rows(), inputs_in.rows())?;
    same_len(features_ood.rows(), inputs_ood.rows())?;
    let fd = nearest_dist(features_ood, features_in)?;
    let xd = nearest_dist(inputs_ood, inputs_in)?;
    let ratios: Vec<f64> = fd
        .iter()
        .zip(&xd)
        .filter(|(_, x)| **x > 0.0)
        .map(|(f, x)| f / x)
        .collect();
    if ratios.is_empty() {
        return Err(MetricError::Argument("every OoD input coincides with a training input".into()));
    }
    let contraction_ratio = median(ratios);
    let feature_scatter = scatter(features_in);
    let input_scatter = scatter(inputs_in);
    let normalized_contraction_ratio = if feature_scatter > 0.0 {
        contraction_ratio * input_scatter / feature_scatter
    } else {
        0.0
    };
    let star_distance = star.map(|k| fd[k]);
    let star_distance_normalized = star_distance.map(|d| if feature_scatter > 0.0 { d / feature_scatter } else { 0.0 });

    let pooled = features_in
        .concat_rows(features_ood)
        .map_err(|e| MetricError::Argument(e.to_string()))?;
    let stride = pooled.rows().div_ceil(GRAM_ROWS);
    let idx: Vec<usize> = (0..pooled.rows()).step_by(stride).collect();
    let sub = pooled.select_rows(&idx);
    let gram_logdet = match init_lengthscale(&sub) {
        Ok(l) if !l.degenerate => {
            let spec = KernelSpec::new(KernelKind::Rbf, l.value, 1.0).expect("positive");
            match cholesky(&kernel_gram(&spec, &sub), JitterPolicy::NONE) {
                Ok(ch) => ch.logdet(),
                Err(_) => f64::NEG_INFINITY,
            }
        }
        _ => f64::NEG_INFINITY,
    };
    Ok(CollapseReport {
        contraction_ratio,
        normalized_contraction_ratio,
        star_distance,
        star_distance_normalized,
        gram_logdet,
        feature_scatter,
        input_scatter,
    })
}
