//! Single-file model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DUEMODEL"                 8 bytes
//! format version             u32
//! header length              u64
//! header                     UTF-8 JSON (see `Header`)
//! array count                u64
//! per array:
//!   name length              u32
//!   name                     UTF-8
//!   rows, cols               u64, u64
//!   values                   rows·cols f64, row-major
//! ```
//!
//! Arrays are stored as raw bit patterns so a round trip is exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use due_core::datasets::Scaler;
use due_core::features::{BatchNormState, Block, FeatureExtractor, FeatureExtractorConfig, Linear};
use due_core::gpcore::{GpState, KernelKind, Likelihood, OutputGp};
use due_core::numcore::Tensor;
use due_core::training::{DueModel, Task};

pub const MAGIC: &[u8; 8] = b"DUEMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model file version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("missing array `{0}`")]
    MissingArray(String),
    #[error("array `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
}

type Result<T> = std::result::Result<T, ModelFileError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormMeta {
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tool_version: String,
    pub task: Task,
    pub extractor: FeatureExtractorConfig,
    pub kernel: KernelKind,
    pub likelihood: Likelihood,
    pub num_outputs: usize,
    /// One entry per residual block; `None` when the block has no batch norm.
    pub batchnorm: Vec<Option<BatchNormMeta>>,
    pub scaler: Scaler,
    pub predict_mc_samples: usize,
    /// The resolved run configuration that produced the model.
    pub config: serde_json::Value,
}

/// A trained model with everything needed to preprocess inputs and
/// predict on them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub header: Header,
    pub model: DueModel,
}

fn row(v: &[f64]) -> Tensor {
    Tensor::row(v.to_vec())
}

fn arrays_of(model: &DueModel) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let linear = |prefix: &str, l: &Linear, out: &mut Vec<(String, Tensor)>| {
        out.push((format!("{prefix}.weight"), l.weight.clone()));
        out.push((format!("{prefix}.bias"), l.bias.clone()));
        out.push((format!("{prefix}.u"), row(&l.u)));
    };
    linear("input", &model.extractor.input, &mut out);
    for (i, b) in model.extractor.blocks.iter().enumerate() {
        linear(&format!("block{i}"), &b.linear, &mut out);
        if let Some(bn) = &b.bn {
            out.push((format!("block{i}.bn.gamma"), bn.gamma.clone()));
            out.push((format!("block{i}.bn.beta"), bn.beta.clone()));
            out.push((format!("block{i}.bn.running_mean"), row(&bn.running_mean)));
            out.push((format!("block{i}.bn.running_var"), row(&bn.running_var)));
        }
    }
    out.push(("gp.z".into(), model.gp.z.clone()));
    out.push(("gp.log_noise".into(), model.gp.log_noise.clone()));
    for (t, o) in model.gp.outputs.iter().enumerate() {
        out.push((format!("gp.out{t}.log_lengthscale"), o.log_lengthscale.clone()));
        out.push((format!("gp.out{t}.log_outputscale"), o.log_outputscale.clone()));
        out.push((format!("gp.out{t}.mean"), o.mean.clone()));
        out.push((format!("gp.out{t}.q_mean"), o.q_mean.clone()));
        out.push((format!("gp.out{t}.q_chol_raw"), o.q_chol_raw.clone()));
    }
    out
}

struct Arrays(BTreeMap<String, Tensor>);

impl Arrays {
    fn take(&mut self, name: &str, expected: (usize, usize)) -> Result<Tensor> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| ModelFileError::MissingArray(name.to_string()))?;
        if t.shape() != expected {
            return Err(ModelFileError::Shape {
                name: name.to_string(),
                found: t.shape(),
                expected,
            });
        }
        Ok(t)
    }

    fn take_vec(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.take(name, (1, len))?.into_data())
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.take(&format!("{prefix}.weight"), (fan_in, fan_out))?,
            bias: self.take(&format!("{prefix}.bias"), (1, fan_out))?,
            u: self.take_vec(&format!("{prefix}.u"), fan_in)?,
        })
    }
}

impl ModelFile {
    pub fn new(model: DueModel, task: Task, scaler: Scaler, predict_mc_samples: usize, config: serde_json::Value) -> Self {
        let header = Header {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            task,
            extractor: model.extractor.config.clone(),
            kernel: model.gp.kind,
            likelihood: model.gp.likelihood,
            num_outputs: model.gp.outputs.len(),
            batchnorm: model
                .extractor
                .blocks
                .iter()
                .map(|b| {
                    b.bn.as_ref().map(|bn| BatchNormMeta {
                        momentum: bn.momentum,
                        eps: bn.eps,
                    })
                })
                .collect(),
            scaler,
            predict_mc_samples,
            config,
        };
        Self { header, model }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(|e| ModelFileError::Header(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let arrays = arrays_of(&self.model);
        w.write_all(&(arrays.len() as u64).to_le_bytes())?;
        for (name, t) in &arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows() as u64).to_le_bytes())?;
            w.write_all(&(t.cols() as u64).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelFileError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(ModelFileError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = read_len(r)?;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let header: Header = serde_json::from_slice(&buf).map_err(|e| ModelFileError::Header(e.to_string()))?;
        let count = read_len(r)?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| ModelFileError::Header(e.to_string()))?;
            let rows = read_len(r)?;
            let cols = read_len(r)?;
            let mut data = Vec::with_capacity(rows * cols);
            let mut b = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::from_vec(rows, cols, data).map_err(|e| ModelFileError::Header(e.to_string()))?;
            arrays.insert(name, t);
        }
        let model = rebuild(&header, Arrays(arrays))?;
        Ok(Self { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|e| ModelFileError::Header(e.to_string()))
}

fn rebuild(h: &Header, mut a: Arrays) -> Result<DueModel> {
    let c = &h.extractor;
    if h.batchnorm.len() != c.depth {
        return Err(ModelFileError::Header(format!(
            "{} batch-norm entries for {} blocks",
            h.batchnorm.len(),
            c.depth
        )));
    }
    let input = a.linear("input", c.input_dim, c.feature_dim)?;
    let mut blocks = Vec::with_capacity(c.depth);
    for (i, meta) in h.batchnorm.iter().enumerate() {
        let linear = a.linear(&format!("block{i}"), c.feature_dim, c.feature_dim)?;
        let bn = match meta {
            None => None,
            Some(m) => Some(BatchNormState {
                gamma: a.take(&format!("block{i}.bn.gamma"), (1, c.feature_dim))?,
                beta: a.take(&format!("block{i}.bn.beta"), (1, c.feature_dim))?,
                running_mean: a.take_vec(&format!("block{i}.bn.running_mean"), c.feature_dim)?,
                running_var: a.take_vec(&format!("block{i}.bn.running_var"), c.feature_dim)?,
                momentum: m.momentum,
                eps: m.eps,
            }),
        };
        blocks.push(Block { linear, bn });
    }
    let z = a
        .0
        .get("gp.z")
        .cloned()
        .ok_or_else(|| ModelFileError::MissingArray("gp.z".into()))?;
    let m = z.rows();
    let z = a.take("gp.z", (m, c.feature_dim))?;
    let log_noise = a.take("gp.log_noise", (1, 1))?;
    let mut outputs = Vec::with_capacity(h.num_outputs);
    for t in 0..h.num_outputs {
        outputs.push(OutputGp {
            log_lengthscale: a.take(&format!("gp.out{t}.log_lengthscale"), (1, 1))?,
            log_outputscale: a.take(&format!("gp.out{t}.log_outputscale"), (1, 1))?,
            mean: a.take(&format!("gp.out{t}.mean"), (1, 1))?,
            q_mean: a.take(&format!("gp.out{t}.q_mean"), (m, 1))?,
            q_chol_raw: a.take(&format!("gp.out{t}.q_chol_raw"), (m, m))?,
        });
    }
    if let Some(extra) = a.0.keys().next() {
        return Err(ModelFileError::Header(format!("unexpected array `{extra}`")));
    }
    Ok(DueModel {
        extractor: FeatureExtractor {
            config: c.clone(),
            input,
            blocks,
        },
        gp: GpState {
            kind: h.kernel,
            likelihood: h.likelihood,
            z,
            outputs,
            log_noise,
        },
    })
}
