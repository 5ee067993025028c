use due_core::baselines::{Ensemble, NetTrainConfig};
use due_core::datasets::{gen_gap_regression, gen_synthetic_cate, CateConfig, Split};
use due_core::features::FeatureExtractorConfig;
use due_core::gpcore::KernelKind;
use due_core::metrics::{cate_estimate, deferral_curve, DeferralPolicy};
use due_core::numcore::Tensor;
use due_core::training::{train, DueModel, OptimizerKind, Task, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn narrow(input_dim: usize) -> FeatureExtractorConfig {
    FeatureExtractorConfig {
        feature_dim: 16,
        depth: 2,
        ..FeatureExtractorConfig::toy(input_dim)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn ensemble_disagrees_in_the_gap() {
    let ds = gen_gap_regression(300, 4).unwrap();
    let cfg = NetTrainConfig {
        optimizer: OptimizerKind::adam(0.01),
        epochs: 60,
        batch_size: 32,
        seed: 9,
    };
    let ext = FeatureExtractorConfig {
        spectral_norm: false,
        ..narrow(1)
    };
    let ens = Ensemble::train(ext, &ds.x, ds.y.data(), 10, &cfg).unwrap();
    assert_eq!(ens.members.len(), 10);

    let support: Vec<f64> = (0..20).map(|i| 3.2 + 2.6 * i as f64 / 19.0).flat_map(|v| [v, -v]).collect();
    let gap: Vec<f64> = (0..20).map(|i| -1.5 + 3.0 * i as f64 / 19.0).collect();
    let vs = ens.predict(&Tensor::column(support)).unwrap().var;
    let vg = ens.predict(&Tensor::column(gap)).unwrap().var;
    assert!(mean(&vs) < mean(&vg), "support {} gap {}", mean(&vs), mean(&vg));
}

fn cate_model(seed: u64) -> (DueModel, due_core::datasets::Dataset) {
    let ds = gen_synthetic_cate(CateConfig::new(300), seed).unwrap();
    let train_set = ds.split(Split::Train);
    let x = train_set.x_with_treatment().unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::adam(0.01),
        epochs: 15,
        batch_size: 64,
        init_subset_size: 1000,
        num_inducing: 20,
        seed,
        elbo_mc_samples: 8,
        predict_mc_samples: 32,
        kernel: KernelKind::Matern32,
        noise_var: 0.1,
        task: Task::Regression,
        full_elbo: false,
    };
    let mut model = DueModel::initialize(narrow(x.cols()), &x, &train_set.y, &cfg).unwrap();
    let log = train(&mut model, &x, &train_set.y, &cfg).unwrap();
    assert_eq!(log.epochs.len(), 15);
    (model, ds)
}

#[test]
fn cate_pipeline_is_deterministic_and_well_formed() {
    let (model, ds) = cate_model(3);
    let test = ds.split(Split::Test);
    let truth = test.cate.clone().unwrap();
    let est = cate_estimate(&model, &test.x, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(est.mean.len(), test.len());
    assert!(est.mean.iter().all(|v| v.is_finite()));
    assert!(est.variance.iter().all(|v| *v >= 0.0 && v.is_finite()));

    let (again, _) = cate_model(3);
    assert_eq!(model, again);

    for policy in [DeferralPolicy::Random, DeferralPolicy::Uncertainty] {
        let none = deferral_curve(&est.mean, &truth, &est.variance, 0.0, policy, 5).unwrap();
        assert_eq!(none.retained, test.len());
        let half = deferral_curve(&est.mean, &truth, &est.variance, 0.5, policy, 5).unwrap();
        assert_eq!(half.retained, (test.len() as f64 * 0.5).round() as usize);
        assert!(half.rmse.is_finite());
    }
}
