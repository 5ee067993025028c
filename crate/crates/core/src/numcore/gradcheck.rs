//! Central finite-difference checks for graph-built scalar functions.

use super::error::Result;
use super::graph::{Graph, OpKind, Var};
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)` over all inputs.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step [`FD_STEP`]. `f` receives a fresh graph and the input vars.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients_with(inputs, None, f)
}

/// As [`check_gradients`], optionally corrupting one op's backward rule.
pub fn check_gradients_with<F>(inputs: &[Tensor], fault: Option<OpKind>, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    if let Some(k) = fault {
        g.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[k].rows(), inputs[k].cols());
        for e in 0..inputs[k].len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[k].data_mut()[e] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[k].data_mut()[e] = orig;
            num.data_mut()[e] = (fp - fm) / (2.0 * FD_STEP);
        }
        numeric.push(num);
    }

    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            diff2 += (x - y) * (x - y);
            a2 += x * x;
            n2 += y * y;
            max_abs = max_abs.max((x - y).abs());
        }
    }
    let rel_err = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-8);
    Ok(GradCheck {
        rel_err,
        max_abs_err: max_abs,
        analytic,
        numeric,
    })
}
