use super::tensor::Tensor;

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

fn w_t_u(w: &Tensor, u: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; w.cols()];
    for (i, ui) in u.iter().enumerate() {
        for (vj, wij) in v.iter_mut().zip(w.row_slice(i)) {
            *vj += wij * ui;
        }
    }
    v
}

fn w_v(w: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row_slice(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Estimates the largest singular value of `w` (`a×b`) by `iters` rounds of
/// power iteration warm-started from `u` (length `a`), which is updated in
/// place. The estimate `‖W v‖` with `‖v‖ = 1` never exceeds the true value.
pub fn power_iteration(w: &Tensor, u: &mut Vec<f64>, iters: usize) -> f64 {
    if u.len() != w.rows() || u.iter().all(|x| *x == 0.0) {
        *u = vec![1.0; w.rows()];
    }
    normalize(u);
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let mut v = w_t_u(w, u);
        if normalize(&mut v) == 0.0 {
            return 0.0;
        }
        let mut wv = w_v(w, &v);
        sigma = normalize(&mut wv);
        if sigma == 0.0 {
            return 0.0;
        }
        *u = wv;
    }
    sigma
}

/// Runs power iteration until successive estimates differ by at most
/// `tol·σ` (or `max_iters` is reached). Returns `(σ, iterations used)`.
pub fn power_iteration_converged(
    w: &Tensor,
    u: &mut Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> (f64, usize) {
    let mut prev = power_iteration(w, u, 1);
    for it in 2..=max_iters {
        let s = power_iteration(w, u, 1);
        if (s - prev).abs() <= tol * s.max(f64::MIN_POSITIVE) {
            return (s, it);
        }
        prev = s;
    }
    (prev, max_iters)
}
