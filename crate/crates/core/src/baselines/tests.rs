use super::*;
use crate::datasets;
use proptest::prelude::{prop, prop_assert, proptest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rbf(a: &[f64], b: &[f64], l: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-0.5 * d2 / (l * l)).exp()
}

#[test]
fn rff_approximates_rbf_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(20, 2, |_, _| rng.gen_range(-1.0..1.0));
    let rff = RffModel::new(2, 10_000, 0.7, 1.0, 1.0, 11).unwrap();
    let phi = rff.features(&x).unwrap();
    let approx = phi.matmul(&phi.transpose()).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        for j in 0..20 {
            let exact = rbf(x.row_slice(i), x.row_slice(j), 0.7);
            worst = worst.max((approx.get(i, j) - exact).abs());
        }
    }
    assert!(worst < 0.05, "max kernel error {worst}");
    let diag_mean = approx.diag().iter().sum::<f64>() / 20.0;
    assert!((diag_mean - 1.0).abs() < 0.02, "diag mean {diag_mean}");
}

#[test]
fn rff_prior_variance_without_data() {
    let rff = RffModel::new(1, 512, 1.0, 2.0, 1.0, 0).unwrap();
    let x = Tensor::column(vec![-3.0, 0.0, 5.0]);
    let phi = rff.features(&x).unwrap();
    let p = rff.predict_features(&phi, 0.1).unwrap();
    assert_eq!(p.mean, vec![0.0; 3]);
    for v in &p.latent_var {
        assert!((v - 2.0).abs() < 0.3, "prior latent variance {v}");
    }
}

#[test]
fn rff_draws_are_seeded() {
    let a = RffModel::new(3, 64, 0.5, 1.0, 1.0, 21).unwrap();
    let b = RffModel::new(3, 64, 0.5, 1.0, 1.0, 21).unwrap();
    let c = RffModel::new(3, 64, 0.5, 1.0, 1.0, 22).unwrap();
    assert_eq!(a.frequencies, b.frequencies);
    assert_eq!(a.phases, b.phases);
    assert_ne!(a.frequencies, c.frequencies);
    assert!(a.phases.data().iter().all(|p| (0.0..std::f64::consts::TAU).contains(p)));
}

#[test]
fn rff_prior_total_variance_adds_noise() {
    let rff = RffModel::new(1, 128, 1.0, 1.0, 2.0, 3).unwrap();
    let x = Tensor::column(vec![0.3, -1.2]);
    let phi = rff.features(&x).unwrap();
    let p = rff.predict_features(&phi, 0.25).unwrap();
    for i in 0..2 {
        let norm2: f64 = phi.row_slice(i).iter().map(|v| v * v).sum();
        assert!((p.latent_var[i] - norm2 / 2.0).abs() < 1e-12);
        assert!((p.total_var()[i] - norm2 / 2.0 - 0.25).abs() < 1e-12);
    }
}

#[test]
fn rff_duplicated_data_lowers_variance() {
    let x = Tensor::column(vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    let y: Vec<f64> = x.data().iter().map(|v| v.sin()).collect();
    let mut once = RffModel::new(1, 256, 0.5, 1.0, 1.0, 4).unwrap();
    let mut twice = once.clone();
    once.fit_inputs(&x, &y, 0.1, 0.0).unwrap();
    let x2 = x.concat_rows(&x).unwrap();
    let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
    twice.fit_inputs(&x2, &y2, 0.1, 0.0).unwrap();
    let q = Tensor::column(vec![-0.75, 0.25, 3.0]);
    let a = once.predict_features(&once.features(&q).unwrap(), 0.0).unwrap();
    let b = twice.predict_features(&twice.features(&q).unwrap(), 0.0).unwrap();
    for (va, vb) in a.latent_var.iter().zip(&b.latent_var) {
        assert!(vb <= va, "{vb} > {va}");
    }
    assert!(b.latent_var[0] < a.latent_var[0]);
}

#[test]
fn rff_chunked_fit_matches_direct() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = RFF_CHUNK + 317;
    let x = Tensor::from_fn(n, 1, |_, _| rng.gen_range(-2.0..2.0));
    let y: Vec<f64> = x.data().iter().map(|v| v.cos()).collect();
    let mut chunked = RffModel::new(1, 64, 0.8, 1.0, 1.0, 2).unwrap();
    let mut direct = chunked.clone();
    chunked.fit_inputs(&x, &y, 0.05, 0.3).unwrap();
    direct.fit(&direct.features(&x).unwrap(), &y, 0.05, 0.3).unwrap();
    let a = chunked.posterior.unwrap().mean;
    let b = direct.posterior.unwrap().mean;
    let diff = a.zip_map(&b, |p, q| (p - q).abs()).unwrap().max_abs();
    assert!(diff < 1e-8, "posterior means differ by {diff}");
}

#[test]
fn rff_rejects_bad_arguments() {
    assert!(RffModel::new(1, 0, 1.0, 1.0, 1.0, 0).is_err());
    assert!(RffModel::new(1, 8, 0.0, 1.0, 1.0, 0).is_err());
    let mut m = RffModel::new(1, 8, 1.0, 1.0, 1.0, 0).unwrap();
    assert!(m.fit_inputs(&Tensor::column(vec![0.0]), &[1.0, 2.0], 0.1, 0.0).is_err());
    assert!(m.fit_inputs(&Tensor::column(vec![0.0]), &[1.0], 0.0, 0.0).is_err());
}

#[test]
fn mixture_of_identical_members() {
    let (m, v) = mixture_moments(&[vec![0.5, -1.0], vec![0.5, -1.0]], &[vec![0.3, 2.0], vec![0.3, 2.0]]);
    assert_eq!(m, vec![0.5, -1.0]);
    assert!((v[0] - 0.3).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12);
}

#[test]
fn mixture_of_opposed_point_masses() {
    let (m, v) = mixture_moments(&[vec![1.0], vec![-1.0]], &[vec![0.0], vec![0.0]]);
    assert_eq!(m, vec![0.0]);
    assert!((v[0] - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn mixture_variance_dominates_average(
        members in prop::collection::vec((-5.0f64..5.0, 0.0f64..3.0), 2..6)
    ) {
        let means: Vec<Vec<f64>> = members.iter().map(|p| vec![p.0]).collect();
        let vars: Vec<Vec<f64>> = members.iter().map(|p| vec![p.1]).collect();
        let (_, v) = mixture_moments(&means, &vars);
        let avg = members.iter().map(|p| p.1).sum::<f64>() / members.len() as f64;
        prop_assert!(v[0] >= avg - 1e-9);
    }
}

proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
    #[test]
    fn rff_variance_is_monotone_in_nested_data(
        xs in prop::collection::vec(-3.0f64..3.0, 4..30),
        cut in 1usize..4,
        seed in 0u64..1000,
    ) {
        let n = xs.len();
        let small_n = n * cut / 4;
        let y: Vec<f64> = xs.iter().map(|v| v.sin()).collect();
        let base = RffModel::new(1, 32, 0.8, 1.0, 1.0, seed).unwrap();
        let q = Tensor::column(vec![-4.0, -1.0, 0.0, 2.5, 5.0]);
        let phi_q = base.features(&q).unwrap();
        let mut prev = base.predict_features(&phi_q, 0.0).unwrap().latent_var;
        for m in [small_n, n] {
            let mut model = base.clone();
            if m > 0 {
                model.fit_inputs(&Tensor::column(xs[..m].to_vec()), &y[..m], 0.1, 0.0).unwrap();
            }
            let v = model.predict_features(&phi_q, 0.0).unwrap().latent_var;
            for (a, b) in v.iter().zip(&prev) {
                prop_assert!(*a <= b * (1.0 + 1e-9) + 1e-12, "{a} > {b}");
            }
            prev = v;
        }
    }
}

fn small_cfg(seed: u64, epochs: usize) -> NetTrainConfig {
    NetTrainConfig {
        optimizer: OptimizerKind::adam(0.01),
        epochs,
        batch_size: 32,
        seed,
    }
}

fn narrow(input_dim: usize) -> FeatureExtractorConfig {
    FeatureExtractorConfig {
        feature_dim: 16,
        depth: 2,
        spectral_norm: false,
        ..FeatureExtractorConfig::toy(input_dim)
    }
}

#[test]
fn softmax_separates_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 80;
    let x = Tensor::from_fn(n, 2, |i, _| if i < n / 2 { -3.0 } else { 3.0 } + rng.gen_range(-0.5..0.5));
    let y = Tensor::from_fn(n, 2, |i, j| ((i < n / 2) == (j == 0)) as u8 as f64);
    let (net, hist) = SoftmaxNet::train(narrow(2), &x, &y, &small_cfg(1, 30)).unwrap();
    assert!(hist.last().unwrap() < &hist[0]);
    let p = net.predict_proba(&x).unwrap();
    for i in 0..n {
        let row = p.row_slice(i);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let pred = (row[1] > row[0]) as usize;
        assert_eq!(pred, (i >= n / 2) as usize, "row {i}: {row:?}");
    }
}

#[test]
fn ensemble_is_deterministic_and_fits() {
    let data = datasets::gen_gap_regression(60, 2).unwrap();
    let x = data.x.clone();
    let y = data.y.col_values(0);
    let a = Ensemble::train(narrow(1), &x, &y, 3, &small_cfg(4, 300)).unwrap();
    let b = Ensemble::train(narrow(1), &x, &y, 3, &small_cfg(4, 300)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.members[0], a.members[1]);
    let p = a.predict(&x).unwrap();
    let mse = p.mean.iter().zip(&y).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / y.len() as f64;
    assert!(mse < 0.2, "ensemble mse {mse}");
    assert!(p.var.iter().all(|v| *v > 0.0));
}

#[test]
fn rff_regressor_is_deterministic() {
    let data = datasets::gen_gap_regression(50, 3).unwrap();
    let ext = FeatureExtractorConfig {
        feature_dim: 16,
        depth: 2,
        ..FeatureExtractorConfig::toy(1)
    };
    let rcfg = RffConfig {
        num_features: 128,
        ..RffConfig::default()
    };
    let (a, _) = RffRegressor::train(ext.clone(), &data.x, data.y.data(), &rcfg, &small_cfg(2, 20)).unwrap();
    let (b, _) = RffRegressor::train(ext, &data.x, data.y.data(), &rcfg, &small_cfg(2, 20)).unwrap();
    assert_eq!(a, b);
    let p = a.predict(&data.x).unwrap();
    assert!(p.latent_var.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert_eq!(p.total_var().len(), data.x.rows());
}

#[test]
fn net_config_is_validated() {
    let x = Tensor::column(vec![0.0, 1.0]);
    let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let mut cfg = small_cfg(0, 1);
    cfg.epochs = 0;
    assert!(SoftmaxNet::train(narrow(1), &x, &y, &cfg).is_err());
    assert!(SoftmaxNet::train(narrow(1), &x, &y.slice_rows(0, 1), &small_cfg(0, 1)).is_err());
}
