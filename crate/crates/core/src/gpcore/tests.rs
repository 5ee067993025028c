use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::{FeatureExtractor, FeatureExtractorConfig, Mode};
use crate::numcore::gradcheck::check_gradients;
use crate::numcore::{Graph, NumError, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

fn min_eig(t: &Tensor) -> f64 {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
        .symmetric_eigenvalues()
        .min()
}

fn toy_1d(n: usize, seed: u64) -> (Tensor, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let y = x.iter().map(|v| v.sin() + 0.1 * rng.gen_range(-1.0..1.0)).collect();
    (Tensor::column(x), y)
}

/// Random variational state with a well-conditioned `S`.
fn randomize_variational(state: &mut GpState, rng: &mut ChaCha8Rng) {
    let m = state.num_inducing();
    for o in &mut state.outputs {
        o.q_mean = rand_tensor(rng, m, 1, 1.0);
        o.q_chol_raw = Tensor::from_fn(m, m, |i, j| {
            if j < i {
                rng.gen_range(-0.3..0.3)
            } else if i == j {
                rng.gen_range(-1.0..0.3)
            } else {
                0.0
            }
        });
    }
}

fn to_num(e: GpError) -> NumError {
    match e {
        GpError::Num(n) => n,
        other => NumError::Contract(other.to_string()),
    }
}

#[test]
fn kernel_examples() {
    let x = Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap();
    for kind in [KernelKind::Rbf, KernelKind::Matern32] {
        let spec = KernelSpec::new(kind, 0.7, 2.5).unwrap();
        assert!((kernel_eval(&spec, &x, &x).unwrap().item() - 2.5).abs() < 1e-12);
        assert_eq!(kernel_gram(&spec, &x).item(), 2.5);
    }
    let spec = KernelSpec::new(KernelKind::Rbf, 1.3, 1.0).unwrap();
    let a = Tensor::row(vec![0.0, 0.0]);
    let b = Tensor::row(vec![1.3 * 0.6, 1.3 * 0.8]);
    let k = kernel_eval(&spec, &a, &b).unwrap().item();
    assert!((k - (-0.5f64).exp()).abs() < 1e-12);
    assert!((k - 0.60653).abs() < 1e-5);

    // Matérn-3/2 written in terms of the distance
    let spec = KernelSpec::new(KernelKind::Matern32, 0.8, 1.7).unwrap();
    let d = 0.9f64;
    let b = Tensor::row(vec![d, 0.0]);
    let r = 3f64.sqrt() * d / 0.8;
    let want = 1.7 * (1.0 + r) * (-r).exp();
    assert!((kernel_eval(&spec, &a, &b).unwrap().item() - want).abs() < 1e-12);

    assert!(KernelSpec::new(KernelKind::Rbf, 0.0, 1.0).is_err());
}

#[test]
fn gram_matrices_are_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [KernelKind::Rbf, KernelKind::Matern32] {
        for _ in 0..10 {
            let x = rand_tensor(&mut rng, 6, 3, 2.0);
            let spec = KernelSpec::new(kind, rng.gen_range(0.2..3.0), rng.gen_range(0.1..3.0)).unwrap();
            let k = kernel_gram(&spec, &x);
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(k.get(i, j), k.get(j, i));
                }
            }
            assert!(min_eig(&k) >= -1e-10);
        }
    }
}

#[test]
fn init_lengthscale_examples() {
    let two = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0]]).unwrap();
    assert_eq!(init_lengthscale(&two).unwrap().value, 3.0);
    let line = Tensor::column(vec![0.0, 1.0, 2.0]);
    assert!((init_lengthscale(&line).unwrap().value - 4.0 / 3.0).abs() < 1e-15);
    let dup = Tensor::from_rows(&vec![vec![1.5, -2.0]; 5]).unwrap();
    let init = init_lengthscale(&dup).unwrap();
    assert!(init.degenerate);
    assert_eq!(init.value, 1.0);
    assert!(init_lengthscale(&Tensor::zeros(1, 2)).is_err());
}

#[test]
fn init_inducing_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, 7, 2, 1.0);
    assert_eq!(init_inducing(&x, 7, 0).unwrap(), x);
    assert!(init_inducing(&x, 8, 0).is_err());
    let big = rand_tensor(&mut rng, 100, 3, 1.0);
    assert_eq!(init_inducing(&big, 10, 5).unwrap(), init_inducing(&big, 10, 5).unwrap());
}

fn gaussian_state(z: Tensor, l: f64, noise: f64) -> GpState {
    GpState::new(KernelKind::Rbf, Likelihood::Gaussian, z, 1, l, noise).unwrap()
}

#[test]
fn prior_state_reproduces_gp_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = rand_tensor(&mut rng, 5, 2, 1.0);
    for kind in [KernelKind::Rbf, KernelKind::Matern32] {
        let mut st = GpState::new(kind, Likelihood::Gaussian, z.clone(), 2, 0.8, 0.01).unwrap();
        st.outputs[0].mean = Tensor::scalar(0.4);
        st.outputs[1].log_outputscale = Tensor::scalar(1.3f64.ln());
        let f = rand_tensor(&mut rng, 9, 2, 2.0);
        let p = svgp_predict(&st, &f).unwrap();
        for i in 0..9 {
            assert!((p.mean.get(i, 0) - 0.4).abs() < 1e-12);
            assert!(p.mean.get(i, 1).abs() < 1e-12);
            assert!((p.var.get(i, 0) - 1.0).abs() < 1e-6);
            assert!((p.var.get(i, 1) - 1.3).abs() < 1e-6);
        }
    }
}

#[test]
fn vanishing_output_scale_collapses_to_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = rand_tensor(&mut rng, 4, 2, 1.0);
    let mut st = gaussian_state(z.clone(), 1.0, 0.01);
    randomize_variational(&mut st, &mut rng);
    st.outputs[0].log_outputscale = Tensor::scalar(-60.0);
    st.outputs[0].mean = Tensor::scalar(-0.7);
    let p = svgp_predict(&st, &rand_tensor(&mut rng, 6, 2, 1.0)).unwrap();
    for i in 0..6 {
        assert!((p.mean.get(i, 0) + 0.7).abs() < 1e-9);
        assert!(p.var.get(i, 0) <= 1e-12);
    }
}

#[test]
fn tight_svgp_matches_exact_gp() {
    let (x, y) = toy_1d(20, 7);
    let mut st = gaussian_state(x.clone(), 0.9, 0.01);
    st.outputs[0].mean = Tensor::scalar(0.1);
    st.fit_variational_gaussian(&x, &Tensor::column(y.clone())).unwrap();

    let test = Tensor::column((0..61).map(|i| -4.0 + i as f64 * 8.0 / 60.0).collect());
    let p = svgp_predict(&st, &test).unwrap();
    let spec = st.kernel(0);
    let (em, ev) = exact_gp_predict(&spec, &x, &y, 0.01, &test).unwrap();
    for i in 0..61 {
        assert!((p.mean.get(i, 0) - em[i]).abs() < 1e-3);
        assert!((p.var.get(i, 0) - ev[i]).abs() < 1e-3);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = elbo(&st, &x, &Tensor::column(y.clone()), 20, 1, &mut rng).unwrap();
    let exact = exact_gp_marginal(&spec, &x, &y, 1.0, 0.1).unwrap().log_marginal;
    assert!((e - exact).abs() < 1e-2, "elbo {e} vs exact {exact}");
    assert!(e <= exact + 1e-6);
}

#[test]
fn kl_examples() {
    let mut st = gaussian_state(Tensor::column(vec![0.0, 1.0]), 1.0, 0.01);
    assert_eq!(kl_whitened(&st), 0.0);
    st.set_q_chol(0, &Tensor::diag_from(&[2.0, 2.0]));
    let want = 3.0 - 2.0 * 2f64.ln();
    assert!((kl_whitened(&st) - want).abs() < 1e-12);
    assert!((kl_whitened(&st) - 1.6137).abs() < 1e-4);

    let mut g = Graph::new();
    let v = st.bind(&mut g, Trainable::Nothing);
    let k = kl_graph(&mut g, &v).unwrap();
    assert!((g.value(k).item() - want).abs() < 1e-12);
}

#[test]
fn gaussian_elbo_hand_formula_with_prior_state() {
    let x = Tensor::column(vec![-0.5, 0.7]);
    let y = [0.3, -1.1];
    let z = Tensor::column(vec![0.0, 1.5, -1.0]);
    let mut st = gaussian_state(z, 0.6, 0.04);
    st.outputs[0].mean = Tensor::scalar(0.2);
    let p = svgp_predict(&st, &x).unwrap();
    let s2 = 0.04;
    let hand: f64 = (0..2)
        .map(|i| {
            let m = p.mean.get(i, 0);
            let v = p.var.get(i, 0);
            -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - ((y[i] - m).powi(2) + v) / (2.0 * s2)
        })
        .sum();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = elbo(&st, &x, &Tensor::column(y.to_vec()), 2, 1, &mut rng).unwrap();
    assert!((e - hand).abs() < 1e-10);
    // minibatch scaling multiplies the likelihood term only
    let e4 = elbo(&st, &x, &Tensor::column(y.to_vec()), 4, 1, &mut rng).unwrap();
    assert!((e4 - 2.0 * hand).abs() < 1e-10);
}

#[test]
fn elbo_never_exceeds_exact_marginal() {
    let (x, y) = toy_1d(15, 8);
    let yt = Tensor::column(y.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..10 {
        let m = [3, 6, 15][trial % 3];
        let z = if m == 15 { x.clone() } else { rand_tensor(&mut rng, m, 1, 3.0) };
        let mut st = gaussian_state(z, rng.gen_range(0.4..2.0), rng.gen_range(0.005..0.3));
        st.outputs[0].log_outputscale = Tensor::scalar(rng.gen_range(-0.5..0.5));
        st.outputs[0].mean = Tensor::scalar(rng.gen_range(-0.3..0.3));
        randomize_variational(&mut st, &mut rng);
        let e = elbo(&st, &x, &yt, 15, 1, &mut rng).unwrap();
        let exact = exact_gp_marginal(&st.kernel(0), &x, &y, 1.0, st.noise_var().sqrt())
            .unwrap()
            .log_marginal;
        assert!(e <= exact + 1e-8, "trial {trial}: {e} > {exact}");
        // the optimal q closes most of the gap
        st.fit_variational_gaussian(&x, &yt).unwrap();
        let best = elbo(&st, &x, &yt, 15, 1, &mut rng).unwrap();
        assert!(best >= e - 1e-9 && best <= exact + 1e-8);
    }
}

#[test]
fn class_probability_examples() {
    let mean = Tensor::from_rows(&[vec![1.0, -0.5, 0.2], vec![0.0, 3.0, -2.0]]).unwrap();
    let pred = Predictive {
        mean: mean.clone(),
        var: Tensor::zeros(2, 3),
        noise_var: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (probs, cls) = predictive_class_probs(&pred, 32, &mut rng);
    for i in 0..2 {
        let r = mean.row_slice(i);
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        for c in 0..3 {
            assert!((probs.get(i, c) - r[c].exp() / z).abs() < 1e-12);
        }
    }
    assert_eq!(cls, vec![0, 1]);

    let sym = Predictive {
        mean: Tensor::full(1, 4, 0.3),
        var: Tensor::full(1, 4, 2.0),
        noise_var: 0.0,
    };
    let samples = 10_000;
    let (p, _) = predictive_class_probs(&sym, samples, &mut rng);
    // per-sample softmax entries lie in [0,1]; their std bounds the MC error
    let se = 0.5 / (samples as f64).sqrt();
    for c in 0..4 {
        assert!((p.get(0, c) - 0.25).abs() < 3.0 * se);
    }
    let wide = Predictive {
        mean: rand_tensor(&mut rng, 20, 5, 3.0),
        var: rand_tensor(&mut rng, 20, 5, 2.0).map(|v| v.abs()),
        noise_var: 0.0,
    };
    let (p, _) = predictive_class_probs(&wide, 7, &mut rng);
    for i in 0..20 {
        assert!((p.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn entropy_examples() {
    let p = Tensor::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0], vec![0.9, 0.1]]).unwrap();
    let h = predictive_entropy(&p);
    assert!((h[0] - 2f64.ln()).abs() < 1e-15);
    assert_eq!(h[1], 0.0);
    assert!((h[2] - 0.3251).abs() < 1e-4);
}

#[test]
fn exact_marginal_examples() {
    let eye = Tensor::eye(4);
    let t = gaussian_marginal_terms(&eye, &[0.0; 4], 1.0, 1e-9).unwrap();
    assert_eq!(t.data_fit, 0.0);
    assert!(t.complexity.abs() < 1e-12);
    assert!((t.log_marginal + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

    // complexity here is the penalty ½·log|C|, entering the total with a minus sign
    let t = gaussian_marginal_terms(&Tensor::eye(1), &[2f64.sqrt()], 1.0, 1.0).unwrap();
    assert!((t.data_fit + 0.5).abs() < 1e-12);
    assert!((t.complexity - 0.5 * 2f64.ln()).abs() < 1e-12);

    // cross-check with the density of a 2-D Gaussian
    let k = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
    let y = [0.3, -0.2];
    let t = gaussian_marginal_terms(&k, &y, 2.0, 0.5).unwrap();
    let (a, b, d) = (2.25, 1.0, 2.25);
    let det: f64 = a * d - b * b;
    let quad = (d * y[0] * y[0] - 2.0 * b * y[0] * y[1] + a * y[1] * y[1]) / det;
    let want = -0.5 * quad - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln();
    assert!((t.log_marginal - want).abs() < 1e-12);
}

#[test]
fn lemma1_data_fit_is_minus_half_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, 50, 2, 2.0);
    let y: Vec<f64> = (0..50)
        .map(|i| (x.get(i, 0) * 1.5).sin() + 0.3 * x.get(i, 1) + 0.1 * rng.gen_range(-1.0..1.0))
        .collect();
    let spec = KernelSpec::new(KernelKind::Rbf, 1.0, 1.0).unwrap();
    let gram = kernel_gram(&spec, &x);
    for ratio in [1e-3, 0.05, 1.0] {
        let r = lemma1_optimum(&gram, &y, ratio).unwrap();
        assert!((r.terms.data_fit + 25.0).abs() / 25.0 < 1e-6, "{:?}", r);
    }
}

#[test]
fn exact_predict_examples() {
    let x = Tensor::column(vec![-1.0, 0.0, 1.5]);
    let y = [0.2, -0.4, 1.0];
    let spec = KernelSpec::new(KernelKind::Rbf, 0.8, 1.3).unwrap();
    let (m, v) = exact_gp_predict(&spec, &x, &y, 1e-10, &x).unwrap();
    for i in 0..3 {
        assert!((m[i] - y[i]).abs() < 1e-6);
        assert!(v[i] < 1e-6);
    }
    let far = Tensor::column(vec![40.0]);
    let (m, v) = exact_gp_predict(&spec, &x, &y, 0.01, &far).unwrap();
    assert!(m[0].abs() < 1e-6);
    assert!((v[0] - 1.3).abs() < 1e-6);
}

#[test]
fn variance_reverts_to_prior_far_from_inducing_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = rand_tensor(&mut rng, 6, 2, 1.0);
    let mut st = GpState::new(KernelKind::Matern32, Likelihood::Gaussian, z, 1, 0.5, 0.01).unwrap();
    randomize_variational(&mut st, &mut rng);
    st.outputs[0].log_outputscale = Tensor::scalar(0.4);
    // Matérn tails decay slowly, so go well past 10 length scales
    let far = Tensor::from_rows(&[vec![40.0, 0.0], vec![0.0, -35.0]]).unwrap();
    let p = svgp_predict(&st, &far).unwrap();
    for i in 0..2 {
        assert!((p.var.get(i, 0) - 0.4f64.exp()).abs() < 1e-6);
    }
}

#[test]
fn variance_shrinks_with_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z = rand_tensor(&mut rng, 5, 2, 1.0);
    let mut st = gaussian_state(z.clone(), 0.8, 0.01);
    randomize_variational(&mut st, &mut rng);
    let f = rand_tensor(&mut rng, 30, 2, 1.5);
    let mut prev = svgp_predict(&st, &f).unwrap().var;
    for _ in 0..5 {
        let l = st.q_chol(0).scale(0.7);
        st.set_q_chol(0, &l);
        let v = svgp_predict(&st, &f).unwrap().var;
        for (a, b) in v.data().iter().zip(prev.data()) {
            assert!(*a >= 0.0 && *a <= *b + 1e-15);
        }
        prev = v;
    }
}

#[test]
fn graph_and_plain_prediction_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = rand_tensor(&mut rng, 5, 3, 1.0);
    let mut st = GpState::new(KernelKind::Rbf, Likelihood::Softmax { mc_samples: 32 }, z, 3, 1.1, 0.01).unwrap();
    randomize_variational(&mut st, &mut rng);
    let f = rand_tensor(&mut rng, 8, 3, 1.5);
    let p = svgp_predict(&st, &f).unwrap();
    let mut g = Graph::new();
    let vars = st.bind(&mut g, Trainable::Nothing);
    let fv = g.constant(f.clone());
    let (m, v) = latent_graph(&mut g, st.kind, &vars, fv).unwrap();
    for (a, b) in g.value(m).data().iter().zip(p.mean.data()) {
        assert!((a - b).abs() < 1e-10);
    }
    for (a, b) in g.value(v).data().iter().zip(p.var.data()) {
        assert!((a - b).abs() < 1e-10);
    }
    // paired covariance of a point with itself is its variance
    let c = st.posterior().unwrap().paired_covariance(&f, &f).unwrap();
    for (a, b) in c.data().iter().zip(p.var.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn chunked_prediction_matches_single_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let z = rand_tensor(&mut rng, 4, 1, 1.0);
    let mut st = gaussian_state(z.clone(), 0.8, 0.01);
    randomize_variational(&mut st, &mut rng);
    let f = rand_tensor(&mut rng, 5000, 1, 3.0);
    let post = st.posterior().unwrap();
    let all = post.predict(&f).unwrap();
    let head = post.predict(&f.slice_rows(0, 100)).unwrap();
    let tail = post.predict(&f.slice_rows(4900, 5000)).unwrap();
    assert_eq!(all.mean.slice_rows(0, 100), head.mean);
    assert_eq!(all.var.slice_rows(4900, 5000), tail.var);
}

fn elbo_gradcheck(kind: KernelKind, likelihood: Likelihood, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_out = match likelihood {
        Likelihood::Gaussian => 1,
        Likelihood::Softmax { .. } => 3,
    };
    let cfg = FeatureExtractorConfig {
        input_dim: 2,
        feature_dim: 3,
        depth: 1,
        activation: crate::features::Activation::Elu,
        ..FeatureExtractorConfig::toy(2)
    };
    let fe = FeatureExtractor::new(cfg, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, 6, 2, 1.5);
    let y = match likelihood {
        Likelihood::Gaussian => rand_tensor(&mut rng, 6, 1, 1.0),
        Likelihood::Softmax { .. } => Tensor::from_fn(6, 3, |i, j| if i % 3 == j { 1.0 } else { 0.0 }),
    };
    let z = rand_tensor(&mut rng, 4, 3, 1.0);
    let mut st = GpState::new(kind, likelihood, z, t_out, 0.9, 0.05).unwrap();
    randomize_variational(&mut st, &mut rng);
    for o in &mut st.outputs {
        o.mean = Tensor::scalar(rng.gen_range(-0.5..0.5));
        o.log_outputscale = Tensor::scalar(rng.gen_range(-0.3..0.3));
    }
    let nf = fe.params().len();
    let mut inputs: Vec<Tensor> = fe.params().into_iter().cloned().collect();
    inputs.extend(st.params().into_iter().cloned());
    let chk = check_gradients(&inputs, |g, vars| {
        let xv = g.constant(x.clone());
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (f, _) = fe
            .forward_graph(g, &vars[..nf], xv, Mode::Train, &mut r)
            .map_err(|e| NumError::Contract(e.to_string()))?;
        let gv = GpVars::from_flat(&vars[nf..]).map_err(to_num)?;
        let parts = elbo_graph(g, &st, &gv, f, &y, 10, 4, &mut r).map_err(to_num)?;
        Ok(parts.elbo)
    })
    .unwrap();
    chk.rel_err
}

#[test]
fn elbo_gradients_match_finite_differences() {
    for seed in 0..4 {
        for kind in [KernelKind::Rbf, KernelKind::Matern32] {
            for lik in [Likelihood::Gaussian, Likelihood::Softmax { mc_samples: 32 }] {
                let err = elbo_gradcheck(kind, lik, seed);
                assert!(err < 1e-4, "seed {seed} {kind:?} {lik:?}: {err}");
            }
        }
    }
}

#[test]
fn coincidence_path_shrinks_complexity() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&mut rng, 12, 2, 2.0);
    let spec = KernelSpec::new(KernelKind::Rbf, 1.0, 1.0).unwrap();
    // noise-free draw from the prior at the end configuration of the path
    let mut end = x.clone();
    end.row_slice_mut(1).copy_from_slice(&x.row_slice(0).to_vec());
    let l = crate::numcore::cholesky(&kernel_gram(&spec, &end), Default::default()).unwrap().l;
    let eps = rand_tensor(&mut rng, 12, 1, 1.7);
    let mut y = l.matmul(&eps).unwrap().into_data();
    y[1] = y[0];
    let path = coincidence_path(&spec, &x, &y, (0, 1), 20, 1.0, (1e-4, 1.0)).unwrap();
    assert_eq!(path.len(), 21);
    for w in path.windows(2) {
        assert!(w[1].terms.complexity < w[0].terms.complexity, "{:?}", w);
    }
    assert!(path[0].terms.complexity - path[20].terms.complexity > 5.0);
    assert_eq!(path[20].distance, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_prior(seed in any::<u64>(), m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = rand_tensor(&mut rng, m, 2, 1.0);
        let mut st = GpState::new(KernelKind::Rbf, Likelihood::Gaussian, z, 2, 1.0, 0.1).unwrap();
        prop_assert_eq!(kl_whitened(&st), 0.0);
        randomize_variational(&mut st, &mut rng);
        prop_assert!(kl_whitened(&st) > 0.0);
    }

    #[test]
    fn predictive_variances_are_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = rand_tensor(&mut rng, 5, 2, 1.0);
        let mut st = GpState::new(KernelKind::Matern32, Likelihood::Gaussian, z, 1, 0.7, 0.1).unwrap();
        randomize_variational(&mut st, &mut rng);
        for o in &mut st.outputs {
            o.q_chol_raw.map_inplace(|v| v * 3.0);
        }
        let p = svgp_predict(&st, &rand_tensor(&mut rng, 20, 2, 3.0)).unwrap();
        prop_assert!(p.var.data().iter().all(|v| *v >= VARIANCE_FLOOR));
    }
}
