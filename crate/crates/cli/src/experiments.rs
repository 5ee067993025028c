//! Experiment protocols behind the demos. Each takes a setup struct whose
//! `Default` is the full-scale protocol and `quick()` a small one for
//! smoke runs, and returns plain reports plus the trained models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use due_core::baselines::{Ensemble, NetTrainConfig, RffConfig, RffRegressor, SoftmaxNet};
use due_core::datasets::{self, CateConfig, Dataset, Split};
use due_core::features::{Activation, FeatureExtractorConfig};
use due_core::gpcore::{predictive_entropy, KernelKind};
use due_core::metrics::{self, cate_estimate, collapse_metrics, deferral_curve, CollapseReport, DeferralPolicy};
use due_core::numcore::Tensor;
use due_core::rng::{child_seed, substream};
use due_core::training::{self, DueModel, OptimizerKind, Task, TrainConfig, TrainLog};

use crate::Result;

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// `k` cell midpoints of `[lo, hi]`.
pub fn linspace_mid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    (0..k).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / k as f64).collect()
}

/// `k` evenly spaced points including both ends.
pub fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![lo];
    }
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

/// Row-major `res × res` grid over `[lo, hi]²`, first coordinate fastest.
pub fn grid_2d(lo: f64, hi: f64, res: usize) -> Tensor {
    let ticks = linspace(lo, hi, res);
    Tensor::from_fn(res * res, 2, |k, j| if j == 0 { ticks[k % res] } else { ticks[k / res] })
}

/// Centroid of the rows of a 2-D input set and the largest distance to it.
pub fn data_radius(x: &Tensor) -> ([f64; 2], f64) {
    let c = [mean(&x.col_values(0)), mean(&x.col_values(1))];
    let r = (0..x.rows())
        .map(|i| ((x.get(i, 0) - c[0]).powi(2) + (x.get(i, 1) - c[1]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    (c, r)
}

/// `k` points on a circle around the data centroid at `factor` times the
/// data radius.
pub fn far_ring(x: &Tensor, factor: f64, k: usize) -> Tensor {
    let (c, r) = data_radius(x);
    Tensor::from_fn(k, 2, |i, j| {
        let t = std::f64::consts::TAU * i as f64 / k as f64;
        c[j] + factor * r * if j == 0 { t.cos() } else { t.sin() }
    })
}

/// Validation NLL of a DUE model: Gaussian with the learned noise, or
/// class NLL with Monte Carlo probabilities.
pub fn validation_nll(model: &DueModel, x: &Tensor, y: &Tensor, task: Task, mc: usize, seed: u64) -> Result<f64> {
    match task {
        Task::Regression => {
            let p = model.predict(x)?;
            let var: Vec<f64> = p.var.data().iter().map(|v| v + p.noise_var).collect();
            Ok(metrics::gaussian_nll(p.mean.data(), &var, y.data())?)
        }
        Task::Classification => {
            let mut rng = substream(seed, "val_mc");
            let probs = model.predict_proba(x, mc, &mut rng)?;
            let labels = (0..y.rows())
                .map(|i| {
                    let r = y.row_slice(i);
                    (0..r.len()).fold(0, |b, c| if r[c] > r[b] { c } else { b })
                })
                .collect::<Vec<_>>();
            Ok(metrics::class_nll(&probs, &labels)?)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selected {
    pub model: DueModel,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_nll: f64,
}

/// Trains and keeps the parameters of the epoch with the lowest
/// validation NLL (first such epoch on ties).
pub fn train_select_on_val(
    mut model: DueModel,
    (x, y): (&Tensor, &Tensor),
    (xv, yv): (&Tensor, &Tensor),
    cfg: &TrainConfig,
) -> Result<Selected> {
    let mut best: Option<(f64, usize, DueModel)> = None;
    let mut err = None;
    let val_seed = child_seed(cfg.seed, "val", 0);
    let log = training::train_with_hook(&mut model, x, y, cfg, |rec, m| {
        if err.is_some() {
            return;
        }
        match validation_nll(m, xv, yv, cfg.task, cfg.predict_mc_samples, val_seed) {
            Ok(v) => {
                if best.as_ref().map_or(true, |b| v < b.0) {
                    best = Some((v, rec.epoch, m.clone()));
                }
            }
            Err(e) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    let (best_val_nll, best_epoch, model) = best.expect("at least one epoch");
    Ok(Selected {
        model,
        log,
        best_epoch,
        best_val_nll,
    })
}

fn train_due(ext: FeatureExtractorConfig, x: &Tensor, y: &Tensor, cfg: &TrainConfig) -> Result<(DueModel, TrainLog)> {
    let mut m = DueModel::initialize(ext, x, y, cfg)?;
    let log = training::train(&mut m, x, y, cfg)?;
    Ok((m, log))
}

fn entropy_of(model: &DueModel, x: &Tensor, mc: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = substream(seed, "predict");
    Ok(predictive_entropy(&model.predict_proba(x, mc, &mut rng)?))
}

fn classification_cfg(seed: u64, epochs: usize, num_inducing: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::sgd(0.01, 0.9),
        epochs,
        batch_size: 64,
        init_subset_size: 1000,
        num_inducing,
        seed,
        elbo_mc_samples: 8,
        predict_mc_samples: 32,
        kernel: KernelKind::Rbf,
        noise_var: 0.01,
        task: Task::Classification,
        full_elbo: false,
    }
}

// ---------------------------------------------------------------- two moons

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoMoonsSetup {
    pub n: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub seed: u64,
    pub epochs: usize,
    pub num_inducing: usize,
    /// Far-field ring radius in multiples of the data radius.
    pub ring_factor: f64,
    pub ring_points: usize,
    pub predict_mc_samples: usize,
}

impl Default for TwoMoonsSetup {
    fn default() -> Self {
        Self {
            n: 200,
            noise: 0.1,
            data_seed: 0,
            seed: 7,
            epochs: 1000,
            num_inducing: 4,
            ring_factor: 5.0,
            ring_points: 256,
            predict_mc_samples: 256,
        }
    }
}

impl TwoMoonsSetup {
    pub fn quick() -> Self {
        Self {
            epochs: 20,
            ..Self::default()
        }
    }

    pub fn due_extractor(&self) -> FeatureExtractorConfig {
        FeatureExtractorConfig::toy(2)
    }

    /// Plain feed-forward network without residual connections or
    /// spectral normalization.
    pub fn gpdnn_extractor(&self) -> FeatureExtractorConfig {
        FeatureExtractorConfig {
            residual: false,
            spectral_norm: false,
            ..FeatureExtractorConfig::toy(2)
        }
    }

    pub fn softmax_extractor(&self) -> FeatureExtractorConfig {
        FeatureExtractorConfig {
            spectral_norm: false,
            ..FeatureExtractorConfig::toy(2)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        classification_cfg(self.seed, self.epochs, self.num_inducing)
    }

    pub fn net_config(&self) -> NetTrainConfig {
        NetTrainConfig {
            optimizer: OptimizerKind::sgd(0.01, 0.9),
            epochs: self.epochs,
            batch_size: 64,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoMoonsReport {
    pub due_train_accuracy: f64,
    pub due_train_entropy: f64,
    pub due_far_entropy: f64,
    pub gpdnn_train_accuracy: f64,
    pub gpdnn_far_entropy: f64,
    pub softmax_train_accuracy: f64,
    pub softmax_far_entropy: f64,
    pub ring_radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoMoonsModels {
    pub data: Dataset,
    pub due: DueModel,
    pub gpdnn: DueModel,
    pub softmax: SoftmaxNet,
}

fn argmax_rows(p: &Tensor) -> Vec<usize> {
    (0..p.rows())
        .map(|i| {
            let r = p.row_slice(i);
            (0..r.len()).fold(0, |b, c| if r[c] > r[b] { c } else { b })
        })
        .collect()
}

pub fn two_moons(setup: &TwoMoonsSetup) -> Result<(TwoMoonsReport, TwoMoonsModels)> {
    let data = datasets::gen_two_moons(setup.n, setup.noise, setup.data_seed)?;
    let labels = data.labels();
    let ring = far_ring(&data.x, setup.ring_factor, setup.ring_points);
    let cfg = setup.train_config();
    let mc = setup.predict_mc_samples;

    let ((due, gpdnn), softmax) = rayon::join(
        || {
            rayon::join(
                || train_due(setup.due_extractor(), &data.x, &data.y, &cfg),
                || train_due(setup.gpdnn_extractor(), &data.x, &data.y, &cfg),
            )
        },
        || SoftmaxNet::train(setup.softmax_extractor(), &data.x, &data.y, &setup.net_config()),
    );
    let (due, _) = due?;
    let (gpdnn, _) = gpdnn?;
    let (softmax, _) = softmax?;

    let mut rng = substream(setup.seed, "predict");
    let p_train = due.predict_proba(&data.x, mc, &mut rng)?;
    let g_train = gpdnn.predict_proba(&data.x, mc, &mut rng)?;
    let s_train = softmax.predict_proba(&data.x)?;
    let report = TwoMoonsReport {
        due_train_accuracy: metrics::accuracy(&argmax_rows(&p_train), &labels)?,
        due_train_entropy: mean(&predictive_entropy(&p_train)),
        due_far_entropy: mean(&entropy_of(&due, &ring, mc, setup.seed)?),
        gpdnn_train_accuracy: metrics::accuracy(&argmax_rows(&g_train), &labels)?,
        gpdnn_far_entropy: mean(&entropy_of(&gpdnn, &ring, mc, setup.seed)?),
        softmax_train_accuracy: metrics::accuracy(&argmax_rows(&s_train), &labels)?,
        softmax_far_entropy: mean(&predictive_entropy(&softmax.predict_proba(&ring)?)),
        ring_radius: setup.ring_factor * data_radius(&data.x).1,
    };
    Ok((
        report,
        TwoMoonsModels {
            data,
            due,
            gpdnn,
            softmax,
        },
    ))
}

// ------------------------------------------------------------ inducing sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingSweepSetup {
    /// Rows generated; even rows train, odd rows test.
    pub n: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub seed: u64,
    pub epochs: usize,
    pub inducing: Vec<usize>,
    pub predict_mc_samples: usize,
}

impl Default for InducingSweepSetup {
    fn default() -> Self {
        Self {
            n: 400,
            noise: 0.1,
            data_seed: 0,
            seed: 7,
            epochs: 1000,
            inducing: vec![4, 10, 50],
            predict_mc_samples: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingResult {
    pub num_inducing: usize,
    pub test_nll: f64,
    pub test_accuracy: f64,
}

pub fn inducing_sweep(setup: &InducingSweepSetup) -> Result<Vec<InducingResult>> {
    let data = datasets::gen_two_moons(setup.n, setup.noise, setup.data_seed)?;
    let train_idx: Vec<usize> = (0..data.len()).step_by(2).collect();
    let test_idx: Vec<usize> = (1..data.len()).step_by(2).collect();
    let train = data.subset(&train_idx);
    let test = data.subset(&test_idx);
    let labels = test.labels();
    setup
        .inducing
        .par_iter()
        .map(|&m| {
            let cfg = classification_cfg(setup.seed, setup.epochs, m);
            let (model, _) = train_due(FeatureExtractorConfig::toy(2), &train.x, &train.y, &cfg)?;
            let mut rng = substream(setup.seed, "predict");
            let p = model.predict_proba(&test.x, setup.predict_mc_samples, &mut rng)?;
            Ok(InducingResult {
                num_inducing: m,
                test_nll: metrics::class_nll(&p, &labels)?,
                test_accuracy: metrics::accuracy(&argmax_rows(&p), &labels)?,
            })
        })
        .collect()
}

// ------------------------------------------------------------------ collapse

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseSetup {
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub epochs: usize,
}

impl Default for CollapseSetup {
    fn default() -> Self {
        Self {
            data_seed: 0,
            seeds: (0..5).collect(),
            epochs: 1000,
        }
    }
}

impl CollapseSetup {
    pub fn quick() -> Self {
        Self {
            seeds: vec![0],
            epochs: 20,
            ..Self::default()
        }
    }

    pub fn constrained() -> FeatureExtractorConfig {
        FeatureExtractorConfig::toy(2)
    }

    pub fn unconstrained() -> FeatureExtractorConfig {
        FeatureExtractorConfig {
            residual: false,
            spectral_norm: false,
            ..FeatureExtractorConfig::toy(2)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseRun {
    pub seed: u64,
    pub constrained: CollapseReport,
    pub unconstrained: CollapseReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseSummary {
    pub runs: Vec<CollapseRun>,
    /// Median over seeds of constrained / unconstrained contraction ratio.
    pub contraction_gain: f64,
    /// Median over seeds of constrained / unconstrained normalized star distance.
    pub star_gain: f64,
}

/// Out-of-distribution probe set: grid points outside the 3σ contour of
/// the blobs, with the star point appended as the last row.
pub fn collapse_probe_set(b: &datasets::BlobsGrid) -> Tensor {
    let thr = datasets::blob_log_density(&[datasets::BLOB_MEANS[0][0] + 3.0 * datasets::BLOB_STD, 0.0]);
    let ood: Vec<usize> = (0..b.grid.rows()).filter(|&k| b.grid_log_density[k] < thr).collect();
    b.grid
        .select_rows(&ood)
        .concat_rows(&Tensor::row(b.star.to_vec()))
        .expect("two columns")
}

pub struct CollapseModels {
    pub blobs: datasets::BlobsGrid,
    pub constrained: DueModel,
    pub unconstrained: DueModel,
}

fn collapse_pair(setup: &CollapseSetup, b: &datasets::BlobsGrid, seed: u64) -> Result<(CollapseRun, DueModel, DueModel)> {
    let cfg = classification_cfg(seed, setup.epochs, 4);
    let xo = collapse_probe_set(b);
    let star = Some(xo.rows() - 1);
    let (c, u) = rayon::join(
        || train_due(CollapseSetup::constrained(), &b.data.x, &b.data.y, &cfg),
        || train_due(CollapseSetup::unconstrained(), &b.data.x, &b.data.y, &cfg),
    );
    let (c, _) = c?;
    let (u, _) = u?;
    let report = |m: &DueModel| -> Result<CollapseReport> {
        let fi = m.features(&b.data.x)?;
        let fo = m.features(&xo)?;
        Ok(collapse_metrics(&fi, &fo, &b.data.x, &xo, star)?)
    };
    Ok((
        CollapseRun {
            seed,
            constrained: report(&c)?,
            unconstrained: report(&u)?,
        },
        c,
        u,
    ))
}

/// Returns the summary and the models of the first seed.
pub fn collapse(setup: &CollapseSetup) -> Result<(CollapseSummary, CollapseModels)> {
    let b = datasets::gen_blobs_grid(setup.data_seed);
    let results: Vec<(CollapseRun, DueModel, DueModel)> = setup
        .seeds
        .par_iter()
        .map(|&s| collapse_pair(setup, &b, s))
        .collect::<Result<_>>()?;
    let runs: Vec<CollapseRun> = results.iter().map(|r| r.0.clone()).collect();
    let contraction: Vec<f64> = runs
        .iter()
        .map(|r| r.constrained.contraction_ratio / r.unconstrained.contraction_ratio)
        .collect();
    let star: Vec<f64> = runs
        .iter()
        .map(|r| {
            r.constrained.star_distance_normalized.unwrap_or(f64::NAN)
                / r.unconstrained.star_distance_normalized.unwrap_or(f64::NAN)
        })
        .collect();
    let (_, c, u) = results.into_iter().next().expect("at least one seed");
    Ok((
        CollapseSummary {
            runs,
            contraction_gain: median(&contraction),
            star_gain: median(&star),
        },
        CollapseModels {
            blobs: b,
            constrained: c,
            unconstrained: u,
        },
    ))
}

/// Distance from each probe row's feature to the nearest in-distribution
/// feature, divided by the in-distribution feature scatter.
pub fn nearest_feature_distance(model: &DueModel, x_in: &Tensor, probe: &Tensor) -> Result<Vec<f64>> {
    let fi = model.features(x_in)?;
    let fp = model.features(probe)?;
    let scatter = metrics::scatter(&fi).max(f64::MIN_POSITIVE);
    let d = due_core::numcore::pairwise_sqdist(&fp, &fi)?;
    Ok((0..d.rows())
        .map(|i| d.row_slice(i).iter().copied().fold(f64::INFINITY, f64::min).max(0.0).sqrt() / scatter)
        .collect())
}

// --------------------------------------------------------------- regression

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSetup {
    pub sizes: Vec<usize>,
    pub data_seed: u64,
    pub seed: u64,
    /// Optimizer steps per model, the same at every size.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub num_inducing: usize,
    pub rff_features: usize,
    /// Plot grid over `[-plot_half_width, plot_half_width]`.
    pub plot_half_width: f64,
    pub plot_points: usize,
}

impl Default for GapSetup {
    fn default() -> Self {
        Self {
            sizes: vec![1_000, 100_000],
            data_seed: 1,
            seed: 7,
            steps: 20_000,
            batch_size: 32,
            lr: 0.01,
            num_inducing: 20,
            rff_features: 1024,
            plot_half_width: 8.0,
            plot_points: 321,
        }
    }
}

impl GapSetup {
    pub fn quick() -> Self {
        Self {
            sizes: vec![1_000, 10_000],
            steps: 300,
            ..Self::default()
        }
    }

    pub fn epochs_for(&self, n: usize) -> usize {
        self.steps.div_ceil(n.div_ceil(self.batch_size)).max(1)
    }

    pub fn train_config(&self, n: usize) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::adam(self.lr),
            epochs: self.epochs_for(n),
            batch_size: self.batch_size,
            init_subset_size: 1000,
            num_inducing: self.num_inducing,
            seed: self.seed,
            elbo_mc_samples: 8,
            predict_mc_samples: 32,
            kernel: KernelKind::Rbf,
            noise_var: 0.01,
            task: Task::Regression,
            full_elbo: false,
        }
    }

    pub fn net_config(&self, n: usize) -> NetTrainConfig {
        NetTrainConfig {
            optimizer: OptimizerKind::adam(self.lr),
            epochs: self.epochs_for(n),
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn plot_grid(&self) -> Vec<f64> {
        linspace(-self.plot_half_width, self.plot_half_width, self.plot_points)
    }
}

/// Latent predictive mean and standard deviation of one model on one
/// dataset size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapFit {
    pub model: String,
    pub n: usize,
    pub gap_std: f64,
    pub support_std: f64,
    pub train_rmse: f64,
    pub grid_mean: Vec<f64>,
    pub grid_std: Vec<f64>,
}

fn gap_probe() -> (Tensor, Tensor) {
    let gap = Tensor::column(linspace_mid(-3.0, 3.0, 120));
    let mut sup = linspace_mid(-6.0, -3.0, 60);
    sup.extend(linspace_mid(3.0, 6.0, 60));
    (gap, Tensor::column(sup))
}

fn sqrt_all(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0).sqrt()).collect()
}

pub fn fit_due_gap(setup: &GapSetup, data: &Dataset) -> Result<(GapFit, DueModel)> {
    let n = data.len();
    let (model, _) = train_due(FeatureExtractorConfig::toy(1), &data.x, &data.y, &setup.train_config(n))?;
    let (gap, sup) = gap_probe();
    let grid = Tensor::column(setup.plot_grid());
    let pg = model.predict(&grid)?;
    let fit = GapFit {
        model: "due".into(),
        n,
        gap_std: mean(&sqrt_all(model.predict(&gap)?.var.data())),
        support_std: mean(&sqrt_all(model.predict(&sup)?.var.data())),
        train_rmse: metrics::rmse(model.predict(&data.x)?.mean.data(), data.y.data())?,
        grid_mean: pg.mean.col_values(0),
        grid_std: sqrt_all(pg.var.data()),
    };
    Ok((fit, model))
}

pub fn fit_rff_gap(setup: &GapSetup, data: &Dataset) -> Result<GapFit> {
    let n = data.len();
    let rcfg = RffConfig {
        num_features: setup.rff_features,
        ..RffConfig::default()
    };
    let (model, _) = RffRegressor::train(
        FeatureExtractorConfig::toy(1),
        &data.x,
        data.y.data(),
        &rcfg,
        &setup.net_config(n),
    )?;
    let (gap, sup) = gap_probe();
    let pg = model.predict(&Tensor::column(setup.plot_grid()))?;
    Ok(GapFit {
        model: "rff".into(),
        n,
        gap_std: mean(&sqrt_all(&model.predict(&gap)?.latent_var)),
        support_std: mean(&sqrt_all(&model.predict(&sup)?.latent_var)),
        train_rmse: metrics::rmse(&model.predict(&data.x)?.mean, data.y.data())?,
        grid_mean: pg.mean,
        grid_std: sqrt_all(&pg.latent_var),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffCompareReport {
    /// DUE then RFF for each size, in `sizes` order.
    pub fits: Vec<GapFit>,
    pub rff_gap_shrink: f64,
    /// Largest over smallest DUE gap std across sizes.
    pub due_gap_change: f64,
    /// Smallest DUE gap/support std ratio across sizes.
    pub due_min_gap_support_ratio: f64,
}

impl RffCompareReport {
    pub fn fit(&self, model: &str, n: usize) -> Option<&GapFit> {
        self.fits.iter().find(|f| f.model == model && f.n == n)
    }
}

pub fn rff_compare(setup: &GapSetup) -> Result<RffCompareReport> {
    let per_size: Vec<(GapFit, GapFit)> = setup
        .sizes
        .par_iter()
        .map(|&n| {
            let data = datasets::gen_gap_regression(n, setup.data_seed)?;
            let (due, rff) = rayon::join(|| fit_due_gap(setup, &data), || fit_rff_gap(setup, &data));
            Ok((due?.0, rff?))
        })
        .collect::<Result<_>>()?;
    let due_gap: Vec<f64> = per_size.iter().map(|p| p.0.gap_std).collect();
    let rff_first = per_size.first().map_or(f64::NAN, |p| p.1.gap_std);
    let rff_last = per_size.last().map_or(f64::NAN, |p| p.1.gap_std);
    let max = due_gap.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = due_gap.iter().copied().fold(f64::INFINITY, f64::min);
    let ratio = per_size
        .iter()
        .map(|p| p.0.gap_std / p.0.support_std)
        .fold(f64::INFINITY, f64::min);
    Ok(RffCompareReport {
        fits: per_size.into_iter().flat_map(|(d, r)| [d, r]).collect(),
        rff_gap_shrink: rff_first / rff_last,
        due_gap_change: max / min,
        due_min_gap_support_ratio: ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap1dSetup {
    pub gap: GapSetup,
    pub n: usize,
    pub ensemble_size: usize,
}

impl Default for Gap1dSetup {
    fn default() -> Self {
        Self {
            gap: GapSetup::default(),
            n: 1000,
            ensemble_size: 5,
        }
    }
}

impl Gap1dSetup {
    pub fn quick() -> Self {
        Self {
            gap: GapSetup::quick(),
            n: 300,
            ensemble_size: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gap1dResult {
    pub data: Dataset,
    pub grid: Vec<f64>,
    pub due: GapFit,
    /// Ensemble mean and total standard deviation on the grid.
    pub ensemble_mean: Vec<f64>,
    pub ensemble_std: Vec<f64>,
    pub due_noise_var: f64,
}

/// DUE next to a deep ensemble on the 1-D gap data.
pub fn gap_1d(setup: &Gap1dSetup) -> Result<Gap1dResult> {
    let g = &setup.gap;
    let data = datasets::gen_gap_regression(setup.n, g.data_seed)?;
    let ext = FeatureExtractorConfig {
        spectral_norm: false,
        ..FeatureExtractorConfig::toy(1)
    };
    let (due, ens) = rayon::join(
        || fit_due_gap(g, &data),
        || Ensemble::train(ext, &data.x, data.y.data(), setup.ensemble_size, &g.net_config(setup.n)),
    );
    let (due, model) = due?;
    let grid = g.plot_grid();
    let pe = ens?.predict(&Tensor::column(grid.clone()))?;
    Ok(Gap1dResult {
        data,
        grid,
        due,
        ensemble_mean: pe.mean,
        ensemble_std: sqrt_all(&pe.var),
        due_noise_var: model.gp.noise_var(),
    })
}

// ------------------------------------------------------------- CATE deferral

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CateSetup {
    pub trials: usize,
    pub seed: u64,
    pub n: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub feature_dim: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub num_inducing: usize,
    pub cate_mc_samples: usize,
    pub rates: Vec<f64>,
}

impl Default for CateSetup {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            n: 750,
            epochs: 150,
            lr: 0.01,
            batch_size: 64,
            feature_dim: 200,
            depth: 3,
            dropout_rate: 0.1,
            num_inducing: 100,
            cate_mc_samples: 64,
            rates: vec![0.1, 0.5],
        }
    }
}

impl CateSetup {
    pub fn quick() -> Self {
        Self {
            trials: 2,
            n: 300,
            epochs: 5,
            feature_dim: 32,
            num_inducing: 20,
            ..Self::default()
        }
    }

    pub fn extractor(&self) -> FeatureExtractorConfig {
        FeatureExtractorConfig {
            input_dim: 9,
            feature_dim: self.feature_dim,
            depth: self.depth,
            spectral_coeff: 0.95,
            power_iterations: 1,
            dropout_rate: self.dropout_rate,
            use_batchnorm: false,
            activation: Activation::Elu,
            spectral_norm: true,
            residual: true,
        }
    }

    pub fn train_config(&self, trial: usize) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::adam(self.lr),
            epochs: self.epochs,
            batch_size: self.batch_size,
            init_subset_size: 1000,
            num_inducing: self.num_inducing,
            seed: child_seed(self.seed, "train", trial as u64),
            elbo_mc_samples: 8,
            predict_mc_samples: 32,
            kernel: KernelKind::Matern32,
            noise_var: 0.1,
            task: Task::Regression,
            full_elbo: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeferralRow {
    pub trial: usize,
    pub policy: DeferralPolicy,
    pub rate: f64,
    pub retained: usize,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CateTrial {
    pub trial: usize,
    pub best_epoch: usize,
    pub rmse_all: f64,
    pub rows: Vec<DeferralRow>,
    /// Test-set CATE: truth, estimate and posterior standard deviation.
    pub truth: Vec<f64>,
    pub estimate: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CateSummaryRow {
    pub policy: DeferralPolicy,
    pub rate: f64,
    pub mean_rmse: f64,
    pub std_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CateReport {
    pub trials: Vec<CateTrial>,
    pub summary: Vec<CateSummaryRow>,
}

impl CateReport {
    pub fn mean_rmse(&self, policy: DeferralPolicy, rate: f64) -> f64 {
        self.summary
            .iter()
            .find(|r| r.policy == policy && r.rate == rate)
            .map_or(f64::NAN, |r| r.mean_rmse)
    }

    /// `1 − uncertainty / random` of the mean retained RMSE.
    pub fn improvement(&self, rate: f64) -> f64 {
        1.0 - self.mean_rmse(DeferralPolicy::Uncertainty, rate) / self.mean_rmse(DeferralPolicy::Random, rate)
    }
}

pub fn cate_trial(setup: &CateSetup, trial: usize) -> Result<CateTrial> {
    let ds = datasets::gen_synthetic_cate(CateConfig::new(setup.n), child_seed(setup.seed, "data", trial as u64))?;
    let tr = ds.split(Split::Train);
    let va = ds.split(Split::Val);
    let te = ds.split(Split::Test);
    let xt = tr.x_with_treatment().expect("treatment");
    let xv = va.x_with_treatment().expect("treatment");
    let cfg = setup.train_config(trial);
    let model = DueModel::initialize(setup.extractor(), &xt, &tr.y, &cfg)?;
    let sel = train_select_on_val(model, (&xt, &tr.y), (&xv, &va.y), &cfg)?;
    let mut rng = substream(child_seed(setup.seed, "cate_mc", trial as u64), "mc");
    let est = cate_estimate(&sel.model, &te.x, setup.cate_mc_samples, &mut rng)?;
    let truth = te.cate.clone().expect("cate truth");
    let deferral_seed = child_seed(setup.seed, "deferral", trial as u64);
    let mut rows = Vec::new();
    for &policy in &[DeferralPolicy::Random, DeferralPolicy::Uncertainty] {
        for &rate in &setup.rates {
            let r = deferral_curve(&est.mean, &truth, &est.variance, rate, policy, deferral_seed)?;
            rows.push(DeferralRow {
                trial,
                policy,
                rate,
                retained: r.retained,
                rmse: r.rmse,
            });
        }
    }
    Ok(CateTrial {
        trial,
        best_epoch: sel.best_epoch,
        rmse_all: metrics::rmse(&est.mean, &truth)?,
        rows,
        truth,
        std: sqrt_all(&est.variance),
        estimate: est.mean,
    })
}

pub fn cate_deferral(setup: &CateSetup) -> Result<CateReport> {
    let trials: Vec<CateTrial> = (0..setup.trials)
        .into_par_iter()
        .map(|t| cate_trial(setup, t))
        .collect::<Result<_>>()?;
    let mut summary = Vec::new();
    for &policy in &[DeferralPolicy::Random, DeferralPolicy::Uncertainty] {
        for &rate in &setup.rates {
            let v: Vec<f64> = trials
                .iter()
                .flat_map(|t| t.rows.iter())
                .filter(|r| r.policy == policy && r.rate == rate)
                .map(|r| r.rmse)
                .collect();
            let m = mean(&v);
            let sd = if v.len() > 1 {
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            summary.push(CateSummaryRow {
                policy,
                rate,
                mean_rmse: m,
                std_err: sd / (v.len() as f64).sqrt(),
            });
        }
    }
    Ok(CateReport { trials, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_and_medians() {
        assert_eq!(linspace(-1.0, 1.0, 3), vec![-1.0, 0.0, 1.0]);
        assert_eq!(linspace_mid(0.0, 1.0, 2), vec![0.25, 0.75]);
        let g = grid_2d(-1.0, 1.0, 3);
        assert_eq!(g.rows(), 9);
        assert_eq!(g.row_slice(1), &[0.0, -1.0]);
        assert_eq!(g.row_slice(3), &[-1.0, 0.0]);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn far_ring_sits_at_the_requested_radius() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let (c, r) = data_radius(&x);
        let ring = far_ring(&x, 5.0, 16);
        for i in 0..16 {
            let d = ((ring.get(i, 0) - c[0]).powi(2) + (ring.get(i, 1) - c[1]).powi(2)).sqrt();
            assert!((d - 5.0 * r).abs() < 1e-9);
        }
    }

    #[test]
    fn step_matched_epochs() {
        let s = GapSetup::default();
        assert_eq!(s.epochs_for(1_000), 625);
        assert_eq!(s.epochs_for(100_000), 7);
    }

    #[test]
    fn probe_set_excludes_the_blobs() {
        let b = datasets::gen_blobs_grid(0);
        let p = collapse_probe_set(&b);
        assert_eq!(p.row_slice(p.rows() - 1), &datasets::BLOB_STAR);
        for i in 0..p.rows() - 1 {
            let near = datasets::BLOB_MEANS
                .iter()
                .any(|m| ((p.get(i, 0) - m[0]).powi(2) + (p.get(i, 1) - m[1]).powi(2)).sqrt() < 1.0);
            assert!(!near, "row {i} lies inside a blob");
        }
    }

    #[test]
    fn quick_cate_is_deterministic() {
        let s = CateSetup::quick();
        let a = cate_trial(&s, 1).unwrap();
        let b = cate_trial(&s, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 4);
        assert!(a.best_epoch < s.epochs);
    }
}
