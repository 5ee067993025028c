//! The `train`, `eval`, `demo` and `check` commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use due_core::datasets::{self, CsvSchema, Scaler, Split};
use due_core::gpcore::predictive_entropy;
use due_core::metrics::{self, cate_estimate, DeferralPolicy};
use due_core::numcore::{OpKind, Tensor};
use due_core::rng::substream;
use due_core::selfcheck::{self, CheckResult};
use due_core::training::{self, DueModel, Task, TrainError};

use crate::config::{DataKind, RunConfig};
use crate::experiments::{self as ex, mean};
use crate::manifest::RunManifest;
use crate::modelfile::ModelFile;
use crate::output::{num, Table};
use crate::{CliError, Result};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn argmax_rows(p: &Tensor) -> Vec<usize> {
    (0..p.rows())
        .map(|i| {
            let r = p.row_slice(i);
            (0..r.len()).fold(0, |b, c| if r[c] > r[b] { c } else { b })
        })
        .collect()
}

/// Metrics of a model on one split, keyed `<prefix>_<metric>`.
fn split_metrics(
    m: &mut RunManifest,
    model: &DueModel,
    prefix: &str,
    x: &Tensor,
    y: &Tensor,
    task: Task,
    mc: usize,
    seed: u64,
) -> Result<()> {
    match task {
        Task::Classification => {
            let mut rng = substream(seed, &format!("predict_{prefix}"));
            let p = model.predict_proba(x, mc, &mut rng)?;
            let labels = argmax_rows(y);
            m.metric(format!("{prefix}_accuracy"), metrics::accuracy(&argmax_rows(&p), &labels)?);
            m.metric(format!("{prefix}_nll"), metrics::class_nll(&p, &labels)?);
            m.metric(format!("{prefix}_mean_entropy"), mean(&predictive_entropy(&p)));
        }
        Task::Regression => {
            let p = model.predict(x)?;
            let var: Vec<f64> = p.var.data().iter().map(|v| v + p.noise_var).collect();
            m.metric(format!("{prefix}_rmse"), metrics::rmse(p.mean.data(), y.data())?);
            m.metric(format!("{prefix}_nll"), metrics::gaussian_nll(p.mean.data(), &var, y.data())?);
        }
    }
    Ok(())
}

// -------------------------------------------------------------------- train

pub fn cmd_train(config_path: &Path, out: Option<&Path>) -> Result<RunManifest> {
    let start = Instant::now();
    let cfg = RunConfig::load(config_path)?;
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.clone());
    ensure_dir(&out_dir)?;
    let mut rerun = vec!["train".to_string(), "--config".into(), path_arg(config_path)];
    if let Some(o) = out {
        rerun.extend(["--out".into(), path_arg(o)]);
    }
    let mut man = RunManifest::new("train", rerun, to_json(&cfg));

    let ds = cfg.dataset()?;
    man.datasets.push(ds.provenance.clone());
    let has_splits = !ds.indices(Split::Val).is_empty();
    let train = if has_splits { ds.split(Split::Train) } else { ds.clone() };
    let x = cfg.model_inputs(&train);
    let tcfg = cfg.train_config();
    let task = tcfg.task;
    man.time("data", start);

    let t_train = Instant::now();
    let model = DueModel::initialize(cfg.extractor(x.cols()), &x, &train.y, &tcfg)?;
    let log_path = out_dir.join("train_log.csv");
    let result = if cfg.train.select_on_val {
        let val = ds.split(Split::Val);
        let xv = cfg.model_inputs(&val);
        ex::train_select_on_val(model, (&x, &train.y), (&xv, &val.y), &tcfg).map(|sel| {
            man.metric("best_epoch", sel.best_epoch as f64);
            man.metric("best_val_nll", sel.best_val_nll);
            (sel.model, sel.log)
        })
    } else {
        let mut model = model;
        training::train(&mut model, &x, &train.y, &tcfg)
            .map(|log| (model, log))
            .map_err(CliError::from)
    };
    let (model, log) = result.map_err(|e| {
        partial_log(&e, &log_path);
        e
    })?;
    man.time("train", t_train);
    log.write_csv(&log_path)?;
    man.output("train_log", &log_path);
    if let Some(last) = log.epochs.last() {
        man.metric("final_elbo", last.elbo);
        man.metric("final_noise_var", last.noise_var);
    }

    let t_eval = Instant::now();
    let mc = tcfg.predict_mc_samples;
    split_metrics(&mut man, &model, "train", &x, &train.y, task, mc, cfg.seed)?;
    for (split, name) in [(Split::Val, "val"), (Split::Test, "test")] {
        if has_splits {
            let part = ds.split(split);
            if !part.is_empty() {
                split_metrics(&mut man, &model, name, &cfg.model_inputs(&part), &part.y, task, mc, cfg.seed)?;
            }
        }
    }
    if ds.treatment.is_some() && ds.cate.is_some() && task == Task::Regression {
        let part = if has_splits { ds.split(Split::Test) } else { ds.clone() };
        let mut rng = substream(cfg.seed, "cate_mc");
        let est = cate_estimate(&model, &part.x, mc.max(2), &mut rng)?;
        man.metric("cate_rmse", metrics::rmse(&est.mean, part.cate.as_ref().expect("checked"))?);
    }
    man.time("eval", t_eval);

    let model_path = out_dir.join("model.due");
    let input_scaler = if cfg.data.kind == DataKind::Csv && cfg.data.standardize {
        ds.scaler.clone()
    } else {
        Scaler::identity(ds.x.cols())
    };
    ModelFile::new(model, task, input_scaler, mc, to_json(&cfg)).save(&model_path)?;
    man.output("model", &model_path);
    man.time("total", start);
    let man_path = out_dir.join("manifest.json");
    man.output("manifest", &man_path);
    man.write(&man_path)?;
    Ok(man)
}

/// Keeps the epochs completed before a divergence for diagnosis.
fn partial_log(e: &CliError, path: &Path) {
    if let CliError::Train(TrainError::NonFinite { log, .. }) = e {
        let _ = log.write_csv(path);
    }
}

// --------------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq)]
pub enum EvalSource {
    /// Regenerate (or reload) the data named by a run config.
    Config(PathBuf),
    /// A headed CSV with the model's feature columns.
    Csv(PathBuf),
    /// `[x0_lo, x0_hi, x1_lo, x1_hi]` at `resolution` points per axis; the
    /// second range is ignored for one-dimensional inputs.
    Grid { bounds: [f64; 4], resolution: usize },
}

fn eval_inputs(file: &ModelFile, cfg: &RunConfig, source: &EvalSource) -> Result<(Tensor, Option<Vec<f64>>)> {
    let d = file.header.extractor.input_dim;
    let treated = cfg.data.kind == DataKind::Cate || cfg.data.treatment.is_some();
    let features = if treated { d - 1 } else { d };
    match source {
        EvalSource::Config(p) => {
            let c = RunConfig::load(p)?;
            let ds = c.dataset()?;
            Ok((ds.x.clone(), ds.treatment.clone()))
        }
        EvalSource::Csv(p) => {
            let names = if cfg.data.kind == DataKind::Csv {
                cfg.data.features.clone()
            } else {
                (0..features).map(|j| format!("x{j}")).collect()
            };
            let treatment = treated.then(|| cfg.data.treatment.clone().unwrap_or_else(|| "t".into()));
            let schema = CsvSchema {
                features: names,
                targets: vec![],
                treatment,
                cate: None,
            };
            let ds = datasets::load_csv(p, &schema)?;
            Ok((file.header.scaler.apply(&ds.x), ds.treatment))
        }
        EvalSource::Grid { bounds, resolution } => {
            let r = *resolution;
            if r < 2 {
                return Err(CliError::Usage("grid resolution must be at least 2".into()));
            }
            let x = match features {
                1 => Tensor::column(ex::linspace(bounds[0], bounds[1], r)),
                2 => {
                    let a = ex::linspace(bounds[0], bounds[1], r);
                    let b = ex::linspace(bounds[2], bounds[3], r);
                    Tensor::from_fn(r * r, 2, |k, j| if j == 0 { a[k % r] } else { b[k / r] })
                }
                other => {
                    return Err(CliError::Usage(format!(
                        "grid mode needs a model with 1 or 2 input features, this one has {other}"
                    )))
                }
            };
            let t = treated.then(|| vec![0.0; x.rows()]);
            Ok((x, t))
        }
    }
}

/// Writes one prediction row per input. Columns: the inputs `x0..`, then
/// `p0.., entropy, predicted` for classifiers or `mean, latent_var,
/// noise_var, total_var` for regressors (suffixed `_k` when there are
/// several outputs), then `cate_mean, cate_var` for treatment models.
pub fn cmd_eval(model_path: &Path, source: &EvalSource, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let file = ModelFile::load(model_path)?;
    let cfg: RunConfig = serde_json::from_value(file.header.config.clone()).map_err(|e| CliError::Config {
        key: None,
        message: format!("model file carries an unreadable config: {e}"),
    })?;
    let (x, treatment) = eval_inputs(&file, &cfg, source)?;
    let model = &file.model;
    let inputs = match &treatment {
        Some(t) => x.concat_cols(&Tensor::column(t.clone()))?,
        None => x.clone(),
    };
    if inputs.cols() != file.header.extractor.input_dim {
        return Err(CliError::Usage(format!(
            "inputs have {} columns, the model expects {}",
            inputs.cols(),
            file.header.extractor.input_dim
        )));
    }
    let mut header: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    if treatment.is_some() {
        header.push("t".into());
    }
    let mut cols: Vec<Vec<f64>> = (0..inputs.cols()).map(|j| inputs.col_values(j)).collect();
    let mut man = RunManifest::new("eval", vec![], file.header.config.clone());
    let mc = file.header.predict_mc_samples;
    match file.header.task {
        Task::Classification => {
            let mut rng = substream(cfg.seed, "predict_eval");
            let p = model.predict_proba(&inputs, mc, &mut rng)?;
            for k in 0..p.cols() {
                header.push(format!("p{k}"));
                cols.push(p.col_values(k));
            }
            let h = predictive_entropy(&p);
            man.metric("mean_entropy", mean(&h));
            header.push("entropy".into());
            cols.push(h);
            header.push("predicted".into());
            cols.push(argmax_rows(&p).into_iter().map(|c| c as f64).collect());
        }
        Task::Regression => {
            let p = model.predict(&inputs)?;
            let outputs = p.mean.cols();
            for k in 0..outputs {
                let sfx = if outputs > 1 { format!("_{k}") } else { String::new() };
                let lv = p.var.col_values(k);
                header.extend(["mean", "latent_var", "noise_var", "total_var"].map(|c| format!("{c}{sfx}")));
                cols.push(p.mean.col_values(k));
                cols.push(lv.clone());
                cols.push(vec![p.noise_var; lv.len()]);
                cols.push(lv.iter().map(|v| v + p.noise_var).collect());
            }
            if treatment.is_some() && outputs == 1 {
                let mut rng = substream(cfg.seed, "cate_mc");
                let est = cate_estimate(model, &x, mc.max(2), &mut rng)?;
                header.extend(["cate_mean".to_string(), "cate_var".to_string()]);
                cols.push(est.mean);
                cols.push(est.variance);
            }
        }
    }
    let mut table = Table::new(&header);
    for i in 0..inputs.rows() {
        table.push(cols.iter().map(|c| num(c[i])).collect());
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    table.write(out)?;
    man.rerun = vec!["eval".into(), "--model".into(), path_arg(model_path)];
    match source {
        EvalSource::Config(p) => man.rerun.extend(["--config".into(), path_arg(p)]),
        EvalSource::Csv(p) => man.rerun.extend(["--csv".into(), path_arg(p)]),
        EvalSource::Grid { bounds, resolution } => man.rerun.extend([
            "--grid".into(),
            bounds.map(num).join(","),
            "--resolution".into(),
            resolution.to_string(),
        ]),
    }
    man.rerun.extend(["--out".into(), path_arg(out)]);
    man.metric("rows", inputs.rows() as f64);
    man.output("predictions", out);
    man.time("total", start);
    Ok(man)
}

// --------------------------------------------------------------------- demo

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Demo {
    TwoMoons,
    #[value(name = "gap-1d")]
    #[serde(rename = "gap-1d")]
    Gap1d,
    Collapse,
    RffCompare,
    CateDeferral,
}

impl Demo {
    pub fn name(self) -> &'static str {
        match self {
            Demo::TwoMoons => "two-moons",
            Demo::Gap1d => "gap-1d",
            Demo::Collapse => "collapse",
            Demo::RffCompare => "rff-compare",
            Demo::CateDeferral => "cate-deferral",
        }
    }
}

pub fn cmd_demo(demo: Demo, out_dir: &Path, quick: bool) -> Result<RunManifest> {
    let start = Instant::now();
    ensure_dir(out_dir)?;
    let mut rerun = vec!["demo".to_string(), demo.name().into(), "--out".into(), path_arg(out_dir)];
    if quick {
        rerun.push("--quick".into());
    }
    let mut man = match demo {
        Demo::TwoMoons => demo_two_moons(out_dir, quick)?,
        Demo::Gap1d => demo_gap_1d(out_dir, quick)?,
        Demo::Collapse => demo_collapse(out_dir, quick)?,
        Demo::RffCompare => demo_rff_compare(out_dir, quick)?,
        Demo::CateDeferral => demo_cate(out_dir, quick)?,
    };
    man.command = format!("demo {}", demo.name());
    man.rerun = rerun;
    man.time("total", start);
    let path = out_dir.join("manifest.json");
    man.output("manifest", &path);
    man.write(&path)?;
    Ok(man)
}

fn demo_two_moons(dir: &Path, quick: bool) -> Result<RunManifest> {
    let setup = if quick { ex::TwoMoonsSetup::quick() } else { ex::TwoMoonsSetup::default() };
    let mut man = RunManifest::new("demo", vec![], to_json(&setup));
    let (report, models) = ex::two_moons(&setup)?;
    man.datasets.push(models.data.provenance.clone());
    for (k, v) in to_json(&report).as_object().expect("struct") {
        man.metric(k.clone(), v.as_f64().unwrap_or(f64::NAN));
    }
    let train_path = dir.join("train.csv");
    datasets::write_csv(&models.data, &CsvSchema::default_for(&models.data), &train_path)?;
    man.output("train", &train_path);

    let half = (report.ring_radius / setup.ring_factor * 2.5).ceil();
    let grid = ex::grid_2d(-half, half, 81);
    let mc = setup.predict_mc_samples;
    let mut rng = substream(setup.seed, "predict_grid");
    let due = models.due.predict_proba(&grid, mc, &mut rng)?;
    let gpdnn = models.gpdnn.predict_proba(&grid, mc, &mut rng)?;
    let soft = models.softmax.predict_proba(&grid)?;
    let mut t = Table::new(&[
        "x0", "x1", "softmax_p1", "softmax_entropy", "gpdnn_p1", "gpdnn_entropy", "due_p1", "due_entropy",
    ]);
    let (hs, hg, hd) = (predictive_entropy(&soft), predictive_entropy(&gpdnn), predictive_entropy(&due));
    for i in 0..grid.rows() {
        t.push_numbers(&[
            grid.get(i, 0),
            grid.get(i, 1),
            soft.get(i, 1),
            hs[i],
            gpdnn.get(i, 1),
            hg[i],
            due.get(i, 1),
            hd[i],
        ]);
    }
    let p = dir.join("uncertainty_grid.csv");
    t.write(&p)?;
    man.output("uncertainty_grid", &p);
    Ok(man)
}

fn demo_gap_1d(dir: &Path, quick: bool) -> Result<RunManifest> {
    let setup = if quick { ex::Gap1dSetup::quick() } else { ex::Gap1dSetup::default() };
    let mut man = RunManifest::new("demo", vec![], to_json(&setup));
    let r = ex::gap_1d(&setup)?;
    man.datasets.push(r.data.provenance.clone());
    man.metric("due_gap_std", r.due.gap_std);
    man.metric("due_support_std", r.due.support_std);
    man.metric("due_train_rmse", r.due.train_rmse);
    man.metric("due_noise_var", r.due_noise_var);
    let train_path = dir.join("train.csv");
    datasets::write_csv(&r.data, &CsvSchema::default_for(&r.data), &train_path)?;
    man.output("train", &train_path);
    let mut t = Table::new(&[
        "x", "due_mean", "due_lower", "due_upper", "ensemble_mean", "ensemble_lower", "ensemble_upper",
    ]);
    for (i, x) in r.grid.iter().enumerate() {
        let (dm, ds) = (r.due.grid_mean[i], r.due.grid_std[i]);
        let (em, es) = (r.ensemble_mean[i], r.ensemble_std[i]);
        t.push_numbers(&[*x, dm, dm - 2.0 * ds, dm + 2.0 * ds, em, em - 2.0 * es, em + 2.0 * es]);
    }
    let p = dir.join("predictions.csv");
    t.write(&p)?;
    man.output("predictions", &p);
    Ok(man)
}

fn demo_collapse(dir: &Path, quick: bool) -> Result<RunManifest> {
    let setup = if quick { ex::CollapseSetup::quick() } else { ex::CollapseSetup::default() };
    let mut man = RunManifest::new("demo", vec![], to_json(&setup));
    let (summary, models) = ex::collapse(&setup)?;
    man.datasets.push(models.blobs.data.provenance.clone());
    man.metric("contraction_gain", summary.contraction_gain);
    man.metric("star_gain", summary.star_gain);
    let mut t = Table::new(&[
        "model",
        "seed",
        "contraction_ratio",
        "normalized_contraction_ratio",
        "star_distance",
        "star_distance_normalized",
        "gram_logdet",
        "feature_scatter",
        "input_scatter",
    ]);
    for run in &summary.runs {
        for (name, r) in [("constrained", &run.constrained), ("unconstrained", &run.unconstrained)] {
            let mut row = vec![name.to_string(), run.seed.to_string()];
            row.extend(
                [
                    r.contraction_ratio,
                    r.normalized_contraction_ratio,
                    r.star_distance.unwrap_or(f64::NAN),
                    r.star_distance_normalized.unwrap_or(f64::NAN),
                    r.gram_logdet,
                    r.feature_scatter,
                    r.input_scatter,
                ]
                .map(num),
            );
            t.push(row);
        }
    }
    let p = dir.join("collapse_metrics.csv");
    t.write(&p)?;
    man.output("collapse_metrics", &p);

    let b = &models.blobs;
    let dc = ex::nearest_feature_distance(&models.constrained, &b.data.x, &b.grid)?;
    let du = ex::nearest_feature_distance(&models.unconstrained, &b.data.x, &b.grid)?;
    let mut g = Table::new(&["x0", "x1", "log_density", "constrained_distance", "unconstrained_distance"]);
    for i in 0..b.grid.rows() {
        g.push_numbers(&[b.grid.get(i, 0), b.grid.get(i, 1), b.grid_log_density[i], dc[i], du[i]]);
    }
    let p = dir.join("feature_distance_grid.csv");
    g.write(&p)?;
    man.output("feature_distance_grid", &p);
    let p = dir.join("train.csv");
    datasets::write_csv(&b.data, &CsvSchema::default_for(&b.data), &p)?;
    man.output("train", &p);
    Ok(man)
}

fn demo_rff_compare(dir: &Path, quick: bool) -> Result<RunManifest> {
    let setup = if quick { ex::GapSetup::quick() } else { ex::GapSetup::default() };
    let mut man = RunManifest::new("demo", vec![], to_json(&setup));
    let r = ex::rff_compare(&setup)?;
    for &n in &setup.sizes {
        man.datasets.push(datasets::gen_gap_regression(n, setup.data_seed)?.provenance);
    }
    man.metric("rff_gap_shrink", r.rff_gap_shrink);
    man.metric("due_gap_change", r.due_gap_change);
    man.metric("due_min_gap_support_ratio", r.due_min_gap_support_ratio);
    let mut header = vec!["x".to_string()];
    for f in &r.fits {
        man.metric(format!("{}_n{}_gap_std", f.model, f.n), f.gap_std);
        man.metric(format!("{}_n{}_support_std", f.model, f.n), f.support_std);
        man.metric(format!("{}_n{}_train_rmse", f.model, f.n), f.train_rmse);
        header.push(format!("{}_n{}_mean", f.model, f.n));
        header.push(format!("{}_n{}_std2", f.model, f.n));
    }
    let mut t = Table::new(&header);
    for (i, x) in setup.plot_grid().iter().enumerate() {
        let mut row = vec![*x];
        for f in &r.fits {
            row.push(f.grid_mean[i]);
            row.push(2.0 * f.grid_std[i]);
        }
        t.push_numbers(&row);
    }
    let p = dir.join("series.csv");
    t.write(&p)?;
    man.output("series", &p);
    Ok(man)
}

fn demo_cate(dir: &Path, quick: bool) -> Result<RunManifest> {
    let setup = if quick { ex::CateSetup::quick() } else { ex::CateSetup::default() };
    let mut man = RunManifest::new("demo", vec![], to_json(&setup));
    let r = ex::cate_deferral(&setup)?;
    let mut t = Table::new(&["policy", "rate", "mean_rmse", "std_err", "trials"]);
    for s in &r.summary {
        let policy = match s.policy {
            DeferralPolicy::Random => "random",
            DeferralPolicy::Uncertainty => "uncertainty",
        };
        man.metric(format!("{policy}_{}_rmse", s.rate), s.mean_rmse);
        t.push(vec![
            policy.to_string(),
            num(s.rate),
            num(s.mean_rmse),
            num(s.std_err),
            setup.trials.to_string(),
        ]);
    }
    for &rate in &setup.rates {
        man.metric(format!("improvement_{rate}"), r.improvement(rate));
    }
    let p = dir.join("deferral_table.csv");
    t.write(&p)?;
    man.output("deferral_table", &p);

    let mut per = Table::new(&["trial", "policy", "rate", "retained", "rmse"]);
    for tr in &r.trials {
        for row in &tr.rows {
            per.push(vec![
                tr.trial.to_string(),
                format!("{:?}", row.policy).to_lowercase(),
                num(row.rate),
                row.retained.to_string(),
                num(row.rmse),
            ]);
        }
    }
    let p = dir.join("deferral_trials.csv");
    per.write(&p)?;
    man.output("deferral_trials", &p);

    if let Some(first) = r.trials.first() {
        let mut s = Table::new(&["true_cate", "estimate", "lower95", "upper95"]);
        for i in 0..first.truth.len() {
            let (m, sd) = (first.estimate[i], first.std[i]);
            s.push_numbers(&[first.truth[i], m, m - 1.96 * sd, m + 1.96 * sd]);
        }
        let p = dir.join("cate_intervals.csv");
        s.write(&p)?;
        man.output("cate_intervals", &p);
    }
    Ok(man)
}

// -------------------------------------------------------------------- check

pub fn parse_op(name: &str) -> Result<OpKind> {
    OpKind::ALL
        .iter()
        .copied()
        .find(|op| op.name() == name && *op != OpKind::Leaf)
        .ok_or_else(|| {
            let valid: Vec<&str> = OpKind::ALL
                .iter()
                .filter(|o| **o != OpKind::Leaf)
                .map(|o| o.name())
                .collect();
            CliError::Usage(format!("unknown op `{name}`; valid ops: {}", valid.join(", ")))
        })
}

/// Runs every self-check, prints one line per check and writes the full
/// report as JSON when `report` is given.
pub fn cmd_check(fault: Option<OpKind>, report: Option<&Path>) -> Result<Vec<CheckResult>> {
    let results = selfcheck::run_all(fault);
    for r in &results {
        println!(
            "{} {:<32} measured {:.3e} tolerance {:.3e} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.measured,
            r.tolerance,
            r.detail
        );
    }
    if let Some(p) = report {
        let text = serde_json::to_string_pretty(&results).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(p, text)?;
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::CheckFailed(failed))
    }
}
