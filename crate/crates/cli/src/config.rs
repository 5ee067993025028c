//! Run configuration: a TOML file with a root `seed` and `[data]`,
//! `[model]`, `[train]` and `[output]` sections. Every key is optional
//! except `data.kind`; unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use due_core::datasets::{self, CateConfig, CsvSchema, Dataset};
use due_core::features::{Activation, FeatureExtractorConfig};
use due_core::gpcore::KernelKind;
use due_core::rng::child_seed;
use due_core::training::{OptimizerKind, Task, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    TwoMoons,
    Gap,
    Blobs,
    Cate,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    /// Number of generated rows; defaults per generator.
    pub n: Option<usize>,
    /// Two-moons noise standard deviation.
    pub noise: Option<f64>,
    /// Generator seed; defaults to a child of the root seed.
    pub seed: Option<u64>,
    /// CSV input file.
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub features: Vec<String>,
    #[serde(default)]
    pub targets: Vec<String>,
    pub treatment: Option<String>,
    pub cate: Option<String>,
    /// Required for CSV data.
    pub task: Option<TaskName>,
    /// Fit a per-column scaler on CSV inputs.
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub depth: usize,
    pub spectral_coeff: f64,
    pub power_iterations: usize,
    pub dropout_rate: f64,
    pub batchnorm: bool,
    pub activation: Activation,
    pub spectral_norm: bool,
    pub residual: bool,
    pub kernel: KernelKind,
    pub num_inducing: usize,
    pub noise_var: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let toy = FeatureExtractorConfig::toy(1);
        Self {
            feature_dim: toy.feature_dim,
            depth: toy.depth,
            spectral_coeff: toy.spectral_coeff,
            power_iterations: toy.power_iterations,
            dropout_rate: toy.dropout_rate,
            batchnorm: toy.use_batchnorm,
            activation: toy.activation,
            spectral_norm: toy.spectral_norm,
            residual: toy.residual,
            kernel: KernelKind::Rbf,
            num_inducing: 4,
            noise_var: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_subset_size: usize,
    pub elbo_mc_samples: usize,
    pub predict_mc_samples: usize,
    pub full_elbo: bool,
    /// Keep the epoch with the lowest validation NLL (needs a val split).
    pub select_on_val: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            optimizer: OptimizerName::Sgd,
            lr: 0.01,
            momentum: 0.9,
            epochs: 1000,
            batch_size: 64,
            init_subset_size: 1000,
            elbo_mc_samples: 8,
            predict_mc_samples: 32,
            full_elbo: false,
            select_on_val: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        key: Some(key.to_string()),
        message: message.into(),
    }
}

/// `unknown field `foo`, expected ...` → `foo`.
fn unknown_field(msg: &str) -> Option<&str> {
    let rest = msg.split("unknown field `").nth(1)?;
    rest.split('`').next()
}

fn path_error<E: std::fmt::Display>(err: serde_path_to_error::Error<E>) -> CliError {
    let path = err.path().to_string();
    let inner = err.inner().to_string();
    let key = (path != ".").then_some(path);
    match (unknown_field(&inner), key) {
        (Some(field), key) => {
            let key = key.unwrap_or_else(|| field.to_string());
            CliError::Config {
                message: format!("unknown config key `{key}`"),
                key: Some(key),
            }
        }
        (None, key) => CliError::Config {
            key,
            message: inner.lines().last().unwrap_or_default().to_string(),
        },
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(path_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the `config` entry of a JSON run manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config {
                key: None,
                message: format!("{}: {e}", path.display()),
            })?;
            let inner = v.get("config").cloned().ok_or_else(|| invalid("config", "manifest has no config entry"))?;
            let cfg: RunConfig = serde_path_to_error::deserialize(inner).map_err(path_error)?;
            cfg.validate()?;
            return Ok(cfg.relative_to(path));
        }
        Ok(Self::from_toml_str(&text)?.relative_to(path))
    }

    /// Resolves a relative CSV path against the directory of the config file.
    fn relative_to(mut self, config_path: &Path) -> Self {
        if let (Some(p), Some(dir)) = (&self.data.path, config_path.parent()) {
            if p.is_relative() {
                self.data.path = Some(dir.join(p));
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        if let Some(n) = d.n {
            if n < 10 {
                return Err(invalid("data.n", format!("need at least 10 rows, got {n}")));
            }
        }
        if let Some(s) = d.noise {
            if !(s >= 0.0) {
                return Err(invalid("data.noise", format!("must be >= 0, got {s}")));
            }
        }
        if d.kind == DataKind::Csv {
            if d.path.is_none() {
                return Err(invalid("data.path", "required for csv data"));
            }
            if d.features.is_empty() || d.targets.is_empty() {
                return Err(invalid("data.features", "csv data needs feature and target column names"));
            }
            if d.task.is_none() {
                return Err(invalid("data.task", "required for csv data"));
            }
        }
        if m.feature_dim == 0 {
            return Err(invalid("model.feature_dim", "must be >= 1"));
        }
        if !(m.spectral_coeff > 0.0) {
            return Err(invalid("model.spectral_coeff", format!("must be > 0, got {}", m.spectral_coeff)));
        }
        if !(0.0..1.0).contains(&m.dropout_rate) {
            return Err(invalid("model.dropout_rate", format!("must be in [0, 1), got {}", m.dropout_rate)));
        }
        if m.num_inducing == 0 {
            return Err(invalid("model.num_inducing", "must be >= 1"));
        }
        if !(m.noise_var > 0.0) {
            return Err(invalid("model.noise_var", format!("must be > 0, got {}", m.noise_var)));
        }
        if !(t.lr > 0.0) {
            return Err(invalid("train.lr", format!("must be > 0, got {}", t.lr)));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(invalid("train.momentum", format!("must be in [0, 1), got {}", t.momentum)));
        }
        for (key, v) in [
            ("train.epochs", t.epochs),
            ("train.batch_size", t.batch_size),
            ("train.elbo_mc_samples", t.elbo_mc_samples),
            ("train.predict_mc_samples", t.predict_mc_samples),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be >= 1"));
            }
        }
        if t.init_subset_size < 2 {
            return Err(invalid("train.init_subset_size", "must be >= 2"));
        }
        if t.select_on_val && d.kind != DataKind::Cate {
            return Err(invalid("train.select_on_val", "needs a dataset with a validation split (cate)"));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or_else(|| child_seed(self.seed, "data", 0))
    }

    pub fn task(&self) -> Task {
        match self.data.kind {
            DataKind::TwoMoons | DataKind::Blobs => Task::Classification,
            DataKind::Gap | DataKind::Cate => Task::Regression,
            DataKind::Csv => match self.data.task {
                Some(TaskName::Classification) => Task::Classification,
                _ => Task::Regression,
            },
        }
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let d = &self.data;
        let seed = self.data_seed();
        let ds = match d.kind {
            DataKind::TwoMoons => datasets::gen_two_moons(d.n.unwrap_or(200), d.noise.unwrap_or(0.1), seed)?,
            DataKind::Gap => datasets::gen_gap_regression(d.n.unwrap_or(1000), seed)?,
            DataKind::Blobs => datasets::gen_blobs_grid(seed).data,
            DataKind::Cate => datasets::gen_synthetic_cate(CateConfig::new(d.n.unwrap_or(750)), seed)?,
            DataKind::Csv => {
                let schema = CsvSchema {
                    features: d.features.clone(),
                    targets: d.targets.clone(),
                    treatment: d.treatment.clone(),
                    cate: d.cate.clone(),
                };
                let path = d.path.as_ref().expect("validated");
                let mut ds = datasets::load_csv(path, &schema)?;
                if d.standardize {
                    ds.scaler = datasets::Scaler::fit(&ds.x);
                    ds.x = ds.scaler.apply(&ds.x);
                }
                ds
            }
        };
        Ok(ds)
    }

    /// Model inputs: the treatment indicator is appended when present.
    pub fn model_inputs(&self, ds: &Dataset) -> due_core::numcore::Tensor {
        ds.x_with_treatment().unwrap_or_else(|| ds.x.clone())
    }

    pub fn extractor(&self, input_dim: usize) -> FeatureExtractorConfig {
        let m = &self.model;
        FeatureExtractorConfig {
            input_dim,
            feature_dim: m.feature_dim,
            depth: m.depth,
            spectral_coeff: m.spectral_coeff,
            power_iterations: m.power_iterations,
            dropout_rate: m.dropout_rate,
            use_batchnorm: m.batchnorm,
            activation: m.activation,
            spectral_norm: m.spectral_norm,
            residual: m.residual,
        }
    }

    pub fn optimizer(&self) -> OptimizerKind {
        match self.train.optimizer {
            OptimizerName::Sgd => OptimizerKind::sgd(self.train.lr, self.train.momentum),
            OptimizerName::Adam => OptimizerKind::adam(self.train.lr),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            optimizer: self.optimizer(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            init_subset_size: t.init_subset_size,
            num_inducing: self.model.num_inducing,
            seed: self.seed,
            elbo_mc_samples: t.elbo_mc_samples,
            predict_mc_samples: t.predict_mc_samples,
            kernel: self.model.kernel,
            noise_var: self.model.noise_var,
            task: self.task(),
            full_elbo: t.full_elbo,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(text: &str) -> Option<String> {
        match RunConfig::from_toml_str(text) {
            Err(CliError::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_uses_toy_defaults() {
        let cfg = RunConfig::from_toml_str("[data]\nkind = \"two-moons\"\n").unwrap();
        assert_eq!(cfg.model.feature_dim, 128);
        assert_eq!(cfg.model.depth, 4);
        assert_eq!(cfg.model.num_inducing, 4);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.task(), Task::Classification);
    }

    #[test]
    fn unknown_keys_are_named_with_their_section() {
        assert_eq!(key_of("[data]\nkind = \"gap\"\n[train]\nlr_rate = 0.1\n").as_deref(), Some("train.lr_rate"));
        assert_eq!(key_of("sed = 1\n[data]\nkind = \"gap\"\n").as_deref(), Some("sed"));
    }

    #[test]
    fn bad_values_are_named() {
        assert_eq!(key_of("[data]\nkind = \"gap\"\n[train]\nlr = -1.0\n").as_deref(), Some("train.lr"));
        assert_eq!(key_of("[data]\nkind = \"csv\"\n").as_deref(), Some("data.path"));
        assert_eq!(key_of("[data]\nkind = \"moons\"\n").as_deref(), Some("data.kind"));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::from_toml_str("seed = 3\n[data]\nkind = \"cate\"\nn = 300\n[train]\nselect_on_val = true\n")
            .unwrap();
        let v = serde_json::to_value(&cfg).unwrap();
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
    }
}
