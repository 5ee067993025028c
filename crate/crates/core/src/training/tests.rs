use super::*;
use crate::datasets::{gen_gap_regression, gen_two_moons};
use crate::gpcore::kl_whitened;
use crate::metrics::{accuracy, rmse};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn moons_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::sgd(0.01, 0.9),
        epochs,
        batch_size: 128,
        init_subset_size: 1000,
        num_inducing: 4,
        seed: 7,
        elbo_mc_samples: 8,
        predict_mc_samples: 32,
        kernel: KernelKind::Rbf,
        noise_var: 0.01,
        task: Task::Classification,
        full_elbo: false,
    }
}

fn gap_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::adam(0.01),
        num_inducing: 20,
        task: Task::Regression,
        full_elbo: true,
        batch_size: 32,
        ..moons_cfg(epochs)
    }
}

fn small_ext(input_dim: usize) -> FeatureExtractorConfig {
    FeatureExtractorConfig {
        feature_dim: 16,
        depth: 2,
        ..FeatureExtractorConfig::toy(input_dim)
    }
}

#[test]
fn sgd_examples() {
    let mut p = Tensor::scalar(2.0);
    let mut opt = Optimizer::new(OptimizerKind::sgd(0.1, 0.9));
    opt.step(vec![&mut p], &[Tensor::scalar(0.0)]).unwrap();
    assert_eq!(p.item(), 2.0);

    let mut opt = Optimizer::new(OptimizerKind::sgd(0.1, 0.0));
    opt.step(vec![&mut p], &[Tensor::scalar(1.0)]).unwrap();
    assert!((p.item() - 1.9).abs() < 1e-15);

    let mut q = Tensor::zeros(2, 2);
    assert!(opt.step(vec![&mut q], &[Tensor::zeros(2, 1)]).is_err());
    assert!(opt.step(vec![&mut q], &[]).is_err());
}

#[test]
fn momentum_accumulates() {
    let mut p = Tensor::scalar(0.0);
    let mut opt = Optimizer::new(OptimizerKind::sgd(1.0, 0.5));
    opt.step(vec![&mut p], &[Tensor::scalar(1.0)]).unwrap();
    opt.step(vec![&mut p], &[Tensor::scalar(1.0)]).unwrap();
    assert_eq!(p.item(), -2.5);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = Tensor::scalar(1.0);
    let mut opt = Optimizer::new(OptimizerKind::adam(0.1));
    opt.step(vec![&mut p], &[Tensor::scalar(123.0)]).unwrap();
    assert!((p.item() - 0.9).abs() < 1e-9);
}

#[test]
fn adam_converges_on_quadratic_bowl() {
    let target = [1.5, -2.0, 0.25];
    let scales = [1.0, 10.0, 0.1];
    let mut p = Tensor::zeros(1, 3);
    let mut opt = Optimizer::new(OptimizerKind::adam(0.01));
    for _ in 0..5000 {
        let g = Tensor::from_fn(1, 3, |_, j| 2.0 * scales[j] * (p.get(0, j) - target[j]));
        opt.step(vec![&mut p], &[g]).unwrap();
    }
    for j in 0..3 {
        assert!((p.get(0, j) - target[j]).abs() < 1e-4, "{:?}", p);
    }
}

#[test]
fn adam_on_variational_parameters_reaches_closed_form_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20;
    let x = Tensor::from_fn(n, 1, |i, _| -3.0 + 6.0 * i as f64 / (n - 1) as f64);
    let y = Tensor::from_fn(n, 1, |i, _| (x.get(i, 0)).sin() + 0.1 * rng.gen_range(-1.0..1.0));
    let mut state = GpState::new(KernelKind::Rbf, Likelihood::Gaussian, x.clone(), 1, 1.0, 0.05).unwrap();
    let mut closed = state.clone();
    closed.fit_variational_gaussian(&x, &y).unwrap();
    let mut r = rand::rngs::mock::StepRng::new(0, 0);
    let target = elbo(&closed, &x, &y, n, 1, &mut r).unwrap();

    let mut opt = Optimizer::new(OptimizerKind::adam(0.02));
    for _ in 0..4000 {
        let mut g = Graph::new();
        let vars = state.bind(&mut g, Trainable::VariationalOnly);
        let f = g.constant(x.clone());
        let parts = elbo_graph(&mut g, &state, &vars, f, &y, n, 1, &mut r).unwrap();
        let loss = g.scale(parts.elbo, -1.0 / n as f64);
        g.backward(loss).unwrap();
        let grads: Vec<Tensor> = vars
            .flat()
            .iter()
            .map(|&v| {
                g.grad(v).cloned().unwrap_or_else(|| {
                    let (a, b) = g.shape(v);
                    Tensor::zeros(a, b)
                })
            })
            .collect();
        opt.step(state.params_mut(), &grads).unwrap();
    }
    let got = elbo(&state, &x, &y, n, 1, &mut r).unwrap();
    assert!(got <= target + 1e-9);
    assert!(target - got < 1e-2, "adam {got} vs closed form {target}");
    assert!(kl_whitened(&state) >= 0.0);
}

#[test]
fn initialize_with_exactly_m_points_uses_all_features() {
    let ds = gen_two_moons(4, 0.1, 1).unwrap();
    let cfg = moons_cfg(1);
    let model = DueModel::initialize(small_ext(2), &ds.x, &ds.y, &cfg).unwrap();
    let f = model.features(&ds.x).unwrap();
    let mut want: Vec<Vec<f64>> = (0..4).map(|i| f.row_slice(i).to_vec()).collect();
    let mut got: Vec<Vec<f64>> = (0..4).map(|i| model.gp.z.row_slice(i).to_vec()).collect();
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(want, got);
    assert!(model.gp.outputs.iter().all(|o| o.q_mean.max_abs() == 0.0 && o.mean.item() == 0.0));
    assert!((model.gp.noise_var() - 0.01).abs() < 1e-15);
}

#[test]
fn initialize_is_deterministic_and_scaled() {
    let ds = gen_two_moons(200, 0.1, 2).unwrap();
    let cfg = moons_cfg(1);
    let a = DueModel::initialize(FeatureExtractorConfig::toy(2), &ds.x, &ds.y, &cfg).unwrap();
    let b = DueModel::initialize(FeatureExtractorConfig::toy(2), &ds.x, &ds.y, &cfg).unwrap();
    assert_eq!(a, b);
    let l = a.gp.kernel(0).lengthscale;
    assert!((0.1..=10.0).contains(&l), "{l}");

    let gap = gen_gap_regression(300, 2).unwrap();
    let m = DueModel::initialize(FeatureExtractorConfig::toy(1), &gap.x, &gap.y, &gap_cfg(1)).unwrap();
    let l = m.gp.kernel(0).lengthscale;
    assert!((0.1..=10.0).contains(&l), "{l}");
}

#[test]
fn initialize_rejects_tiny_datasets() {
    let ds = gen_two_moons(3, 0.1, 1).unwrap();
    assert!(matches!(
        DueModel::initialize(small_ext(2), &ds.x, &ds.y, &moons_cfg(1)),
        Err(TrainError::Argument(_))
    ));
}

#[test]
fn config_validation() {
    let mut c = moons_cfg(1);
    c.epochs = 0;
    assert!(c.validate().is_err());
    let mut c = moons_cfg(1);
    c.optimizer = OptimizerKind::adam(0.0);
    assert!(c.validate().is_err());
    let mut c = moons_cfg(1);
    c.num_inducing = 0;
    assert!(c.validate().is_err());
}

#[test]
fn training_is_deterministic() {
    let ds = gen_two_moons(60, 0.1, 3).unwrap();
    let cfg = moons_cfg(3);
    let run = || {
        let mut m = DueModel::initialize(small_ext(2), &ds.x, &ds.y, &cfg).unwrap();
        let log = train(&mut m, &ds.x, &ds.y, &cfg).unwrap();
        (m, log.without_timing())
    };
    let (ma, la) = run();
    let (mb, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(ma, mb);
    assert_eq!(la.epochs.len(), 3);
    assert!(la.epochs.iter().all(|e| e.elbo.is_finite() && e.kl >= 0.0));
}

#[test]
fn non_finite_loss_aborts_with_log() {
    let ds = gen_two_moons(40, 0.1, 3).unwrap();
    let cfg = TrainConfig {
        task: Task::Regression,
        ..moons_cfg(2)
    };
    let y = Tensor::column((0..40).map(|i| if i == 5 { f64::NAN } else { 0.0 }).collect());
    let mut m = DueModel::initialize(small_ext(2), &ds.x, &Tensor::zeros(40, 1), &cfg).unwrap();
    match train(&mut m, &ds.x, &y, &cfg) {
        Err(TrainError::NonFinite { epoch, batch, loss, log }) => {
            assert_eq!((epoch, batch), (0, 0));
            assert!(loss.is_nan());
            assert!(log.epochs.is_empty());
        }
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn lipschitz_bound_holds_at_every_epoch() {
    let ds = gen_two_moons(100, 0.1, 4).unwrap();
    let cfg = moons_cfg(5);
    let mut m = DueModel::initialize(FeatureExtractorConfig::toy(2), &ds.x, &ds.y, &cfg).unwrap();
    let c = m.extractor.config.spectral_coeff;
    let mut epochs = 0;
    train_with_hook(&mut m, &ds.x, &ds.y, &cfg, |_, model| {
        let r = model.extractor.lipschitz_audit();
        assert!(r.input_sigma <= c * (1.0 + 1e-2), "{}", r.input_sigma);
        for s in &r.block_sigmas {
            assert!(*s <= c * (1.0 + 1e-2), "{s}");
        }
        epochs += 1;
    })
    .unwrap();
    assert_eq!(epochs, 5);
}

#[test]
fn two_moons_reaches_high_train_accuracy() {
    let ds = gen_two_moons(200, 0.1, 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 64,
        ..moons_cfg(1000)
    };
    let mut m = DueModel::initialize(FeatureExtractorConfig::toy(2), &ds.x, &ds.y, &cfg).unwrap();
    train(&mut m, &ds.x, &ds.y, &cfg).unwrap();
    let probs = m.predict_proba(&ds.x, 32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let pred: Vec<usize> = (0..probs.rows())
        .map(|i| if probs.get(i, 1) > probs.get(i, 0) { 1 } else { 0 })
        .collect();
    let acc = accuracy(&pred, &ds.labels()).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn gap_regression_fits_and_elbo_rises() {
    let ds = gen_gap_regression(300, 1).unwrap();
    let cfg = gap_cfg(2000);
    let mut m = DueModel::initialize(FeatureExtractorConfig::toy(1), &ds.x, &ds.y, &cfg).unwrap();
    let log = train(&mut m, &ds.x, &ds.y, &cfg).unwrap();
    let pred = m.predict(&ds.x).unwrap();
    let err = rmse(&pred.mean.col_values(0), &ds.y.col_values(0)).unwrap();
    assert!(err <= 0.2, "train rmse {err}");

    // mean full-data ELBO over consecutive tenths of the run; once it has
    // plateaued it may wobble by 0.02 nats per point
    let full: Vec<f64> = log.epochs.iter().map(|e| e.full_elbo.unwrap()).collect();
    let tenth = full.len() / 10;
    let blocks: Vec<f64> = full.chunks(tenth).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let slack = 0.02 * ds.len() as f64;
    for w in blocks.windows(2) {
        assert!(w[1] >= w[0] - slack, "block means {blocks:?}");
    }
    assert!(blocks[9] > blocks[0] + 100.0 * slack);

    let probe: Vec<usize> = (0..ds.len()).step_by(3).collect();
    let p = collapse_probe(&m, &ds.x.select_rows(&probe), &ds.y.select_rows(&probe).col_values(0)).unwrap();
    let n = probe.len() as f64;
    assert!((-0.6 * n..=-0.4 * n).contains(&p.lemma1.terms.data_fit));
    assert!((p.lemma1.terms.data_fit + 0.5 * n).abs() < 1e-4 * n);
    assert!(p.terms.data_fit < 0.0 && p.terms.complexity.is_finite());
}

#[test]
fn probe_complexity_is_smallest_for_coincident_rows() {
    let ds = gen_two_moons(60, 0.1, 5).unwrap();
    let cfg = TrainConfig {
        task: Task::Regression,
        ..moons_cfg(1)
    };
    let y = Tensor::column(ds.x.col_values(0));
    let m = DueModel::initialize(small_ext(2), &ds.x, &y, &cfg).unwrap();
    let base = ds.x.slice_rows(0, 10);
    let mut same = base.clone();
    same.row_slice_mut(1).copy_from_slice(&base.row_slice(0).to_vec());
    let ys = vec![0.3; 10];
    let c_same = collapse_probe(&m, &same, &ys).unwrap();
    assert_eq!(c_same.min_pairwise, 0.0);
    for k in 1..=5 {
        let mut moved = same.clone();
        moved.row_slice_mut(1)[0] += 0.1 * k as f64;
        let c = collapse_probe(&m, &moved, &ys).unwrap();
        assert!(c_same.terms.complexity <= c.terms.complexity);
        assert!(c.min_pairwise > 0.0);
        assert!(c.min_pairwise <= c.mean_pairwise && c.mean_pairwise <= c.max_pairwise);
    }
    assert!(collapse_probe(&m, &base, &ys[..3]).is_err());
}

#[test]
fn train_log_csv_has_header() {
    let ds = gen_two_moons(40, 0.1, 3).unwrap();
    let cfg = moons_cfg(2);
    let mut m = DueModel::initialize(small_ext(2), &ds.x, &ds.y, &cfg).unwrap();
    let log = train(&mut m, &ds.x, &ds.y, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.csv");
    log.write_csv(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,elbo,ell,kl,full_elbo,noise_var,lengthscale_0,outputscale_0,lengthscale_1,outputscale_1,wall_time_s"
    );
    assert_eq!(lines.count(), 2);
}
