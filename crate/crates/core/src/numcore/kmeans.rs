use rand::Rng;

use super::error::{NumError, Result};
use super::linalg;
use super::tensor::Tensor;

pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Inertia after seeding and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations. Empty clusters are
/// reseeded from the point farthest from its assigned centroid.
pub fn kmeans<R: Rng + ?Sized>(points: &Tensor, k: usize, rng: &mut R) -> Result<KMeans> {
    let p = points.rows();
    if k == 0 {
        return Err(NumError::Argument("kmeans needs k >= 1".into()));
    }
    if p < k {
        return Err(NumError::Argument(format!(
            "kmeans needs at least k={k} points, got {p}"
        )));
    }
    let d = points.cols();

    // k-means++ seeding
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    chosen.push(rng.gen_range(0..p));
    let mut best: Vec<f64> = (0..p)
        .map(|i| sqdist(points.row_slice(i), points.row_slice(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in best.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // rounding can exhaust the scan; fall back to the last positive weight
            pick.unwrap_or_else(|| best.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..p).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sqdist(points.row_slice(i), points.row_slice(next)));
        }
    }
    let mut centroids = points.select_rows(&chosen);

    let assign = |centroids: &Tensor| -> Result<(Vec<usize>, Vec<f64>)> {
        let dist = linalg::pairwise_sqdist(points, centroids)?;
        let mut a = Vec::with_capacity(p);
        let mut dd = Vec::with_capacity(p);
        for i in 0..p {
            let row = dist.row_slice(i);
            let (mut j, mut m) = (0, f64::INFINITY);
            for (c, &v) in row.iter().enumerate() {
                if v < m {
                    m = v;
                    j = c;
                }
            }
            // exact distance for the chosen centroid keeps inertia bookkeeping tight
            a.push(j);
            dd.push(sqdist(points.row_slice(i), centroids.row_slice(j)));
        }
        Ok((a, dd))
    };

    let (mut assignments, mut dists) = assign(&centroids)?;
    let mut history = vec![dists.iter().sum::<f64>()];

    for _ in 0..MAX_LLOYD_ITERS {
        // repair empty clusters before the update step
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assignments {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let far = dists
                .iter()
                .enumerate()
                .filter(|(i, _)| counts[assignments[*i]] > 1)
                .fold((usize::MAX, -1.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            if far == usize::MAX {
                break;
            }
            centroids.row_slice_mut(empty).copy_from_slice(points.row_slice(far));
            assignments[far] = empty;
            dists[far] = 0.0;
        }

        let mut sums = Tensor::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums.row_slice_mut(a).iter_mut().zip(points.row_slice(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                let src: Vec<f64> = sums.row_slice(c).iter().map(|s| s * inv).collect();
                centroids.row_slice_mut(c).copy_from_slice(&src);
            }
        }
        let (new_assign, new_dists) = assign(&centroids)?;
        history.push(new_dists.iter().sum());
        let converged = new_assign == assignments;
        assignments = new_assign;
        dists = new_dists;
        if converged {
            break;
        }
    }

    Ok(KMeans {
        centroids,
        assignments,
        inertia_history: history,
    })
}
