//! Dense linear algebra on [`Tensor`]: products, Cholesky with a jitter
//! ladder, triangular solves and squared distances.

use super::error::{dim_err, NumError, Result};
use super::tensor::Tensor;

/// `op(a) · op(b)` where `op` optionally transposes.
pub fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let (m, k) = if ta { (a.cols(), a.rows()) } else { a.shape() };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { b.shape() };
    if k != k2 {
        return dim_err(
            "matmul",
            format!(
                "inner dimensions {k} and {k2} (lhs {:?}{}, rhs {:?}{})",
                a.shape(),
                if ta { "ᵀ" } else { "" },
                b.shape(),
                if tb { "ᵀ" } else { "" }
            ),
        );
    }
    let mut out = Tensor::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    let (rsa, csa) = if ta {
        (1, a.cols() as isize)
    } else {
        (a.cols() as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b.cols() as isize)
    } else {
        (b.cols() as isize, 1)
    };
    // SAFETY: strides and extents are derived from the tensors' own shapes,
    // and `out` is a freshly allocated m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            0.0,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// Jitter ladder for Cholesky: start at `initial·mean(diag)`, multiply by
/// `factor` on failure, give up past `max·mean(diag)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterPolicy {
    pub initial: f64,
    pub factor: f64,
    pub max: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            initial: 1e-8,
            factor: 10.0,
            max: 1e-3,
        }
    }
}

impl JitterPolicy {
    pub const NONE: JitterPolicy = JitterPolicy {
        initial: 0.0,
        factor: 10.0,
        max: 0.0,
    };
}

#[derive(Clone, Debug)]
pub struct Cholesky {
    pub l: Tensor,
    /// Absolute value added to the diagonal before factorization.
    pub jitter: f64,
}

impl Cholesky {
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diag().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let y = solve_triangular(&self.l, b, true, false)?;
        solve_triangular(&self.l, &y, true, true)
    }
}

/// Plain Cholesky of the lower triangle; `Err(pivot)` on a non-positive pivot.
pub fn cholesky_unjittered(a: &Tensor, jitter: f64) -> std::result::Result<Tensor, usize> {
    let n = a.rows();
    let mut l = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j) + jitter;
        {
            let lj = l.row_slice(j);
            d -= lj[..j].iter().map(|x| x * x).sum::<f64>();
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in (j + 1)..n {
            let s = {
                let li = l.row_slice(i);
                let lj = l.row_slice(j);
                li[..j].iter().zip(&lj[..j]).map(|(x, y)| x * y).sum::<f64>()
            };
            l.set(i, j, (a.get(i, j) - s) / djj);
        }
    }
    Ok(l)
}

/// Cholesky factor of `a + jitter·I` following `policy`.
pub fn cholesky(a: &Tensor, policy: JitterPolicy) -> Result<Cholesky> {
    if a.rows() != a.cols() {
        return dim_err("cholesky", format!("non-square {:?}", a.shape()));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Cholesky {
            l: Tensor::zeros(0, 0),
            jitter: 0.0,
        });
    }
    let mean_diag = (a.diag().iter().sum::<f64>() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = policy.initial;
    loop {
        let jitter = rel * mean_diag;
        match cholesky_unjittered(a, jitter) {
            Ok(l) => return Ok(Cholesky { l, jitter }),
            Err(pivot) => {
                let next = rel * policy.factor;
                if rel == 0.0 || next > policy.max * (1.0 + 1e-9) {
                    return Err(NumError::Decomposition { pivot, jitter });
                }
                rel = next;
            }
        }
    }
}

/// Solves `op(t) x = b` for triangular `t`. `lower` states which triangle of
/// `t` holds the matrix; `transpose` solves with `tᵀ` instead.
pub fn solve_triangular(t: &Tensor, b: &Tensor, lower: bool, transpose: bool) -> Result<Tensor> {
    let n = t.rows();
    if t.cols() != n {
        return dim_err("triangular_solve", format!("non-square {:?}", t.shape()));
    }
    if b.rows() != n {
        return dim_err(
            "triangular_solve",
            format!("matrix is {n}x{n} but rhs has {} rows", b.rows()),
        );
    }
    for i in 0..n {
        if t.get(i, i) == 0.0 {
            return Err(NumError::Singular { index: i });
        }
    }
    let k = b.cols();
    let mut x = b.clone();
    // effective triangle of op(t)
    let eff_lower = lower != transpose;
    let at = |i: usize, j: usize| if transpose { t.get(j, i) } else { t.get(i, j) };
    if eff_lower {
        for i in 0..n {
            for j in 0..i {
                let f = at(i, j);
                if f != 0.0 {
                    for c in 0..k {
                        let v = x.get(j, c);
                        let cur = x.get(i, c);
                        x.set(i, c, cur - f * v);
                    }
                }
            }
            let d = at(i, i);
            for c in 0..k {
                let cur = x.get(i, c);
                x.set(i, c, cur / d);
            }
        }
    } else {
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                let f = at(i, j);
                if f != 0.0 {
                    for c in 0..k {
                        let v = x.get(j, c);
                        let cur = x.get(i, c);
                        x.set(i, c, cur - f * v);
                    }
                }
            }
            let d = at(i, i);
            for c in 0..k {
                let cur = x.get(i, c);
                x.set(i, c, cur / d);
            }
        }
    }
    Ok(x)
}

/// Squared Euclidean distances between rows of `a` and rows of `b`,
/// clamped at zero.
pub fn pairwise_sqdist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return dim_err(
            "pairwise_sqdist",
            format!("feature dims {} vs {}", a.cols(), b.cols()),
        );
    }
    let mut out = gemm(a, false, b, true)?;
    let na: Vec<f64> = (0..a.rows())
        .map(|i| a.row_slice(i).iter().map(|x| x * x).sum())
        .collect();
    let nb: Vec<f64> = (0..b.rows())
        .map(|j| b.row_slice(j).iter().map(|x| x * x).sum())
        .collect();
    let m = b.rows();
    for (i, &ai) in na.iter().enumerate() {
        let row = out.row_slice_mut(i);
        for j in 0..m {
            row[j] = (ai + nb[j] - 2.0 * row[j]).max(0.0);
        }
    }
    Ok(out)
}

/// Squared distances of a point set to itself, with an exactly zero diagonal.
pub fn self_sqdist(a: &Tensor) -> Tensor {
    let mut d = pairwise_sqdist(a, a).expect("same feature dimension");
    for i in 0..a.rows() {
        d.set(i, i, 0.0);
    }
    d
}

/// Lower triangle (including the diagonal) of a square matrix.
pub fn tril(a: &Tensor) -> Tensor {
    Tensor::from_fn(a.rows(), a.cols(), |i, j| if j <= i { a.get(i, j) } else { 0.0 })
}
