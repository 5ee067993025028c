//! Synthetic data generators and CSV ingestion.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::Tensor;
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("{0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-column affine standardization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &Tensor) -> Self {
        let n = x.rows().max(1) as f64;
        let mut mean = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row_slice(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row_slice(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - self.mean[j]) / self.std[j])
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) * self.std[j] + self.mean[j])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub params: Vec<(String, f64)>,
    pub seed: u64,
}

/// Ground truth of a treatment-effect dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CateTruth {
    pub mu0: Vec<f64>,
    pub tau: Vec<f64>,
    pub propensity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Model-ready inputs (already standardized when `scaler` is not the identity).
    pub x: Tensor,
    pub y: Tensor,
    pub treatment: Option<Vec<f64>>,
    pub cate: Option<Vec<f64>>,
    pub truth: Option<CateTruth>,
    pub splits: Vec<Split>,
    pub scaler: Scaler,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Rows with the given indices; the scaler and provenance carry over.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            treatment: self.treatment.as_ref().map(pick),
            cate: self.cate.as_ref().map(pick),
            truth: self.truth.as_ref().map(|t| CateTruth {
                mu0: pick(&t.mu0),
                tau: pick(&t.tau),
                propensity: pick(&t.propensity),
            }),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            scaler: self.scaler.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn split(&self, split: Split) -> Dataset {
        self.subset(&self.indices(split))
    }

    /// Class labels of one-hot targets.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.y.rows())
            .map(|i| {
                let r = self.y.row_slice(i);
                (0..r.len()).fold(0, |b, c| if r[c] > r[b] { c } else { b })
            })
            .collect()
    }

    /// Inputs with the treatment indicator appended as the last column.
    pub fn x_with_treatment(&self) -> Option<Tensor> {
        let t = self.treatment.as_ref()?;
        self.x.concat_cols(&Tensor::column(t.clone())).ok()
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    Tensor::from_fn(labels.len(), classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 })
}

/// Two interleaving half circles, standardized.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(DataError::Argument(format!("two moons needs n >= 2, got {n}")));
    }
    let mut rng = substream(seed, "two-moons");
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let arc = |k: usize, count: usize| {
        if count > 1 {
            PI * k as f64 / (count - 1) as f64
        } else {
            0.0
        }
    };
    let mut raw = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n_outer {
        let t = arc(k, n_outer);
        raw.push(vec![t.cos(), t.sin()]);
        labels.push(0);
    }
    for k in 0..n_inner {
        let t = arc(k, n_inner);
        raw.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("finite noise");
        for p in &mut raw {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let raw = Tensor::from_rows(&raw).expect("rectangular");
    let scaler = Scaler::fit(&raw);
    Ok(Dataset {
        x: scaler.apply(&raw),
        y: one_hot(&labels, 2),
        treatment: None,
        cate: None,
        truth: None,
        splits: vec![Split::Train; n],
        scaler,
        provenance: Provenance {
            generator: "two_moons".into(),
            params: vec![("n".into(), n as f64), ("noise_std".into(), noise_std)],
            seed,
        },
    })
}

/// 1-D regression with support on `[−6,−3] ∪ [3,6]` and targets
/// `sin(2x) + N(0, 0.1²)`. Inputs are left in raw units.
pub fn gen_gap_regression(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(DataError::Argument(format!("gap regression needs n >= 2, got {n}")));
    }
    let mut rng = substream(seed, "gap-regression");
    let noise = Normal::new(0.0, 0.1).expect("finite");
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let mag = rng.gen_range(3.0..=6.0);
        let v: f64 = if rng.gen::<bool>() { mag } else { -mag };
        x.push(v);
        y.push((2.0 * v).sin() + noise.sample(&mut rng));
    }
    Ok(Dataset {
        x: Tensor::column(x),
        y: Tensor::column(y),
        treatment: None,
        cate: None,
        truth: None,
        splits: vec![Split::Train; n],
        scaler: Scaler::identity(1),
        provenance: Provenance {
            generator: "gap_regression".into(),
            params: vec![("n".into(), n as f64), ("noise_std".into(), 0.1)],
            seed,
        },
    })
}

pub const BLOB_MEANS: [[f64; 2]; 2] = [[-2.0, 0.0], [2.0, 0.0]];
pub const BLOB_STD: f64 = 0.5;
pub const BLOB_POINTS_PER_CLASS: usize = 100;
pub const BLOB_GRID_HALF_WIDTH: f64 = 6.0;
pub const BLOB_GRID_RESOLUTION: usize = 41;
/// Far-field query point directly above the first blob.
pub const BLOB_STAR: [f64; 2] = [-2.0, 5.0];

#[derive(Clone, Debug)]
pub struct BlobsGrid {
    pub data: Dataset,
    /// Row-major over (x, y), x outer.
    pub grid: Tensor,
    pub grid_log_density: Vec<f64>,
    pub star: [f64; 2],
}

/// Log-density of the equal-weight blob mixture.
pub fn blob_log_density(p: &[f64]) -> f64 {
    let var = BLOB_STD * BLOB_STD;
    let comps: Vec<f64> = BLOB_MEANS
        .iter()
        .map(|m| {
            let d2 = (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2);
            (0.5f64).ln() - (2.0 * PI * var).ln() - d2 / (2.0 * var)
        })
        .collect();
    let mx = comps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + comps.iter().map(|c| (c - mx).exp()).sum::<f64>().ln()
}

/// Two isotropic Gaussian blobs, an evaluation grid over a box around
/// them and a far-field star point. Coordinates are not rescaled.
pub fn gen_blobs_grid(seed: u64) -> BlobsGrid {
    let mut rng = substream(seed, "blobs");
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, m) in BLOB_MEANS.iter().enumerate() {
        for _ in 0..BLOB_POINTS_PER_CLASS {
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            rows.push(vec![m[0] + BLOB_STD * e0, m[1] + BLOB_STD * e1]);
            labels.push(c);
        }
    }
    let n = rows.len();
    let r = BLOB_GRID_RESOLUTION;
    let step = 2.0 * BLOB_GRID_HALF_WIDTH / (r - 1) as f64;
    let grid = Tensor::from_fn(r * r, 2, |k, j| {
        let idx = if j == 0 { k / r } else { k % r };
        -BLOB_GRID_HALF_WIDTH + idx as f64 * step
    });
    let grid_log_density = (0..grid.rows()).map(|k| blob_log_density(grid.row_slice(k))).collect();
    BlobsGrid {
        data: Dataset {
            x: Tensor::from_rows(&rows).expect("rectangular"),
            y: one_hot(&labels, 2),
            treatment: None,
            cate: None,
            truth: None,
            splits: vec![Split::Train; n],
            scaler: Scaler::identity(2),
            provenance: Provenance {
                generator: "blobs_grid".into(),
                params: vec![
                    ("points_per_class".into(), BLOB_POINTS_PER_CLASS as f64),
                    ("std".into(), BLOB_STD),
                ],
                seed,
            },
        },
        grid,
        grid_log_density,
        star: BLOB_STAR,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CateConfig {
    pub n: usize,
    /// Multiplies the treatment effect; 0 gives a null effect.
    pub tau_scale: f64,
    /// Slope of the logistic propensity in `x₀`.
    pub propensity_slope: f64,
    pub noise_std: f64,
}

impl CateConfig {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            tau_scale: 1.0,
            propensity_slope: 3.0,
            noise_std: 0.5,
        }
    }
}

/// Baseline response `μ₀(x)`.
pub fn cate_mu0(x: &[f64]) -> f64 {
    (2.0 * x[1]).sin() + 0.5 * x[2] + 0.5 * x[0] + 0.25 * x[3] * x[4]
}

/// Treatment effect `τ(x)` before `tau_scale`.
pub fn cate_tau(x: &[f64]) -> f64 {
    1.0 + x[0] + 0.5 * x[0] * x[0] + 0.5 * (x[5]).sin()
}

/// `P(t = 1 | x) = σ(slope · x₀)`: units with large `|x₀|` almost never
/// see one of the arms.
pub fn cate_propensity(x: &[f64], slope: f64) -> f64 {
    1.0 / (1.0 + (-slope * x[0]).exp())
}

/// Response-surface treatment data in 8 dimensions with known effect and
/// a 63/27/10 train/val/test split.
pub fn gen_synthetic_cate(cfg: CateConfig, seed: u64) -> Result<Dataset> {
    let n = cfg.n;
    if n < 10 {
        return Err(DataError::Argument(format!("CATE generator needs n >= 10, got {n}")));
    }
    let mut rng = substream(seed, "cate");
    let d = 8;
    let x = Tensor::from_fn(n, d, |_, _| rng.sample(StandardNormal));
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite");
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut mu0 = Vec::with_capacity(n);
    let mut tau = Vec::with_capacity(n);
    let mut prop = Vec::with_capacity(n);
    for i in 0..n {
        let xi = x.row_slice(i);
        let e = cate_propensity(xi, cfg.propensity_slope);
        let ti = if rng.gen::<f64>() < e { 1.0 } else { 0.0 };
        let m0 = cate_mu0(xi);
        let ta = cfg.tau_scale * cate_tau(xi);
        t.push(ti);
        y.push(m0 + ti * ta + noise.sample(&mut rng));
        mu0.push(m0);
        tau.push(ta);
        prop.push(e);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (0.63 * n as f64).round() as usize;
    let n_val = (0.27 * n as f64).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (k, &i) in order.iter().enumerate() {
        splits[i] = if k < n_train {
            Split::Train
        } else if k < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(Dataset {
        x,
        y: Tensor::column(y),
        treatment: Some(t),
        cate: Some(tau.clone()),
        truth: Some(CateTruth {
            mu0,
            tau,
            propensity: prop,
        }),
        splits,
        scaler: Scaler::identity(d),
        provenance: Provenance {
            generator: "synthetic_cate".into(),
            params: vec![
                ("n".into(), n as f64),
                ("tau_scale".into(), cfg.tau_scale),
                ("propensity_slope".into(), cfg.propensity_slope),
                ("noise_std".into(), cfg.noise_std),
            ],
            seed,
        },
    })
}

/// Column layout of a CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub targets: Vec<String>,
    pub treatment: Option<String>,
    pub cate: Option<String>,
}

impl CsvSchema {
    /// `x0.., y0.., t, cate` for a dataset's shape.
    pub fn default_for(ds: &Dataset) -> Self {
        Self {
            features: (0..ds.x.cols()).map(|j| format!("x{j}")).collect(),
            targets: (0..ds.y.cols()).map(|j| format!("y{j}")).collect(),
            treatment: ds.treatment.as_ref().map(|_| "t".into()),
            cate: ds.cate.as_ref().map(|_| "cate".into()),
        }
    }
}

pub fn write_csv(ds: &Dataset, schema: &CsvSchema, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = schema.features.iter().map(String::as_str).collect();
    header.extend(schema.targets.iter().map(String::as_str));
    header.extend(schema.treatment.as_deref());
    header.extend(schema.cate.as_deref());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row_slice(i).iter().map(|v| format!("{v:?}")).collect();
        rec.extend(ds.y.row_slice(i).iter().map(|v| format!("{v:?}")));
        if let (Some(_), Some(t)) = (&schema.treatment, &ds.treatment) {
            rec.push(format!("{:?}", t[i]));
        }
        if let (Some(_), Some(c)) = (&schema.cate, &ds.cate) {
            rec.push(format!("{:?}", c[i]));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Reads a headed CSV into a dataset (all rows tagged train, identity
/// scaler).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let fcols = schema.features.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let ycols = schema.targets.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let tcol = schema.treatment.as_deref().map(col).transpose()?;
    let ccol = schema.cate.as_deref().map(col).transpose()?;

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut t = Vec::new();
    let mut c = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let get = |j: usize| -> Result<f64> {
            let cell = rec.get(j).unwrap_or("").trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    row,
                    column: header.get(j).unwrap_or("").to_string(),
                    value: cell.to_string(),
                })
        };
        x.push(fcols.iter().map(|&j| get(j)).collect::<Result<Vec<_>>>()?);
        y.push(ycols.iter().map(|&j| get(j)).collect::<Result<Vec<_>>>()?);
        if let Some(j) = tcol {
            t.push(get(j)?);
        }
        if let Some(j) = ccol {
            c.push(get(j)?);
        }
    }
    let n = x.len();
    let to_tensor = |rows: Vec<Vec<f64>>, cols: usize| {
        Tensor::from_vec(n, cols, rows.into_iter().flatten().collect()).expect("row lengths checked")
    };
    Ok(Dataset {
        x: to_tensor(x, fcols.len()),
        y: to_tensor(y, ycols.len()),
        treatment: tcol.map(|_| t),
        cate: ccol.map(|_| c),
        truth: None,
        splits: vec![Split::Train; n],
        scaler: Scaler::identity(fcols.len()),
        provenance: Provenance {
            generator: format!("csv:{}", path.display()),
            params: vec![],
            seed: 0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let ds = gen_two_moons(101, 0.0, 3).unwrap();
        let raw = ds.scaler.invert(&ds.x);
        for (i, lab) in ds.labels().into_iter().enumerate() {
            let (a, b) = (raw.get(i, 0), raw.get(i, 1));
            let r = if lab == 0 {
                (a * a + b * b).sqrt()
            } else {
                ((a - 1.0).powi(2) + (b - 0.5).powi(2)).sqrt()
            };
            assert!((r - 1.0).abs() < 1e-12);
            if lab == 0 {
                assert!(b >= -1e-12);
            } else {
                assert!(b <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn moons_are_balanced_standardized_and_seeded() {
        for n in [2, 7, 200] {
            let ds = gen_two_moons(n, 0.1, 1).unwrap();
            let labels = ds.labels();
            let ones = labels.iter().filter(|&&l| l == 1).count();
            assert!((ones as i64 - (n - ones) as i64).abs() <= 1);
        }
        let ds = gen_two_moons(200, 0.1, 1).unwrap();
        for j in 0..2 {
            let col = ds.x.col_values(j);
            let m = col.iter().sum::<f64>() / 200.0;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 200.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        assert_eq!(ds, gen_two_moons(200, 0.1, 1).unwrap());
        assert_ne!(ds.x, gen_two_moons(200, 0.1, 2).unwrap().x);
        assert!(gen_two_moons(1, 0.1, 0).is_err());
    }

    #[test]
    fn gap_regression_examples() {
        let ds = gen_gap_regression(10_000, 4).unwrap();
        let x = ds.x.col_values(0);
        assert!(x.iter().all(|v| (3.0..=6.0).contains(&v.abs())));
        let resid: Vec<f64> = x.iter().zip(ds.y.data()).map(|(a, b)| b - (2.0 * a).sin()).collect();
        let m = resid.iter().sum::<f64>() / resid.len() as f64;
        let sd = (resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (resid.len() - 1) as f64).sqrt();
        assert!((0.08..=0.12).contains(&sd), "{sd}");
        assert_eq!(ds, gen_gap_regression(10_000, 4).unwrap());
    }

    #[test]
    fn blobs_grid_examples() {
        let b = gen_blobs_grid(5);
        let star = blob_log_density(&b.star);
        let min_sample = (0..b.data.len())
            .map(|i| blob_log_density(b.data.x.row_slice(i)))
            .fold(f64::INFINITY, f64::min);
        assert!(star < min_sample);

        let labels = b.data.labels();
        for (c, m) in BLOB_MEANS.iter().enumerate() {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let se = BLOB_STD / (idx.len() as f64).sqrt();
            for j in 0..2 {
                let mean = idx.iter().map(|&i| b.data.x.get(i, j)).sum::<f64>() / idx.len() as f64;
                assert!((mean - m[j]).abs() < 3.0 * se);
            }
        }

        let r = BLOB_GRID_RESOLUTION;
        assert_eq!(b.grid.rows(), r * r);
        for k in 1..b.grid.rows() {
            let (p, q) = (b.grid.row_slice(k - 1), b.grid.row_slice(k));
            assert!(p[0] < q[0] || (p[0] == q[0] && p[1] < q[1]));
        }
        assert_eq!(b.grid.row_slice(0), &[-6.0, -6.0]);
        assert_eq!(b.grid.row_slice(r * r - 1), &[6.0, 6.0]);
    }

    #[test]
    fn cate_examples() {
        let mut cfg = CateConfig::new(200);
        cfg.tau_scale = 0.0;
        let ds = gen_synthetic_cate(cfg, 1).unwrap();
        assert!(ds.cate.as_ref().unwrap().iter().all(|v| *v == 0.0));

        let mut cfg = CateConfig::new(1000);
        cfg.noise_std = 0.0;
        let ds = gen_synthetic_cate(cfg, 2).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        let t = ds.treatment.as_ref().unwrap();
        for i in 0..ds.len() {
            let y_hat = truth.mu0[i] + t[i] * truth.tau[i];
            assert!((y_hat - ds.y.get(i, 0)).abs() < 1e-12);
        }
        let low = truth.propensity.iter().filter(|&&e| !(0.05..=0.95).contains(&e)).count();
        assert!(low > 0);

        let counts = [Split::Train, Split::Val, Split::Test].map(|s| ds.indices(s).len());
        assert_eq!(counts, [630, 270, 100]);
        assert!(gen_synthetic_cate(CateConfig::new(9), 0).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_synthetic_cate(CateConfig::new(40), 3).unwrap();
        let schema = CsvSchema::default_for(&ds);
        let path = dir.path().join("cate.csv");
        write_csv(&ds, &schema, &path).unwrap();
        let back = load_csv(&path, &schema).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.treatment, ds.treatment);
        assert_eq!(back.cate, ds.cate);

        let mut bad = schema.clone();
        bad.targets = vec!["outcome".into()];
        match load_csv(&path, &bad) {
            Err(DataError::MissingColumn(c)) => assert_eq!(c, "outcome"),
            other => panic!("unexpected {other:?}"),
        }

        let hand = dir.path().join("hand.csv");
        std::fs::write(&hand, "a,b,target\n1,2.5,0\n-3,4e-1,1\n0.125,7,-2\n").unwrap();
        let s = CsvSchema {
            features: vec!["a".into(), "b".into()],
            targets: vec!["target".into()],
            treatment: None,
            cate: None,
        };
        let d = load_csv(&hand, &s).unwrap();
        assert_eq!(d.x.data(), &[1.0, 2.5, -3.0, 0.4, 0.125, 7.0]);
        assert_eq!(d.y.data(), &[0.0, 1.0, -2.0]);

        std::fs::write(&hand, "a,b,target\n1,2,0\n1,oops,0\n").unwrap();
        match load_csv(&hand, &s) {
            Err(DataError::Parse { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load_csv(&dir.path().join("none.csv"), &s), Err(DataError::Io { .. })));
    }
}
