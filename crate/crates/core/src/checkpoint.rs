//! Single-file checkpoints: magic, JSON header with a tensor manifest and the
//! run configuration, then raw little-endian tensor data.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::engine::{JetFormer, ModelShape, Trainer};
use crate::error::{Error, Result};
use crate::optim::{AdamW, OptimConfig};

const MAGIC: &[u8; 4] = b"JFCK";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const FIRST: &str = "adam_m/";
const SECOND: &str = "adam_v/";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: String,
    shape: ModelShape,
    step: u64,
    seed: u64,
    adam_t: u64,
    partitions: Vec<Vec<bool>>,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub shape: ModelShape,
    /// Completed training steps.
    pub step: u64,
    pub adam_t: u64,
    pub partitions: Vec<Vec<bool>>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Format(format!("unsupported tensor dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Format(format!("unsupported tensor dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], dtype: &str, shape: &[usize]) -> Result<Tensor> {
    let dev = Device::Cpu;
    let t = match dtype {
        "f32" => Tensor::from_vec(
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>(),
            shape,
            &dev,
        )?,
        "f64" => Tensor::from_vec(
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>(),
            shape,
            &dev,
        )?,
        other => return Err(Error::Format(format!("unsupported tensor dtype {other}"))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn capture(model: &JetFormer, opt: Option<&AdamW>, step: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, var) in model.store.iter() {
            tensors.insert(format!("{PARAM}{name}"), var.as_tensor().clone());
        }
        if let Some(opt) = opt {
            for (name, m) in &opt.first {
                tensors.insert(format!("{FIRST}{name}"), m.clone());
            }
            for (name, v) in &opt.second {
                tensors.insert(format!("{SECOND}{name}"), v.clone());
            }
        }
        Self {
            config: model.cfg.clone(),
            shape: model.shape,
            step,
            adam_t: opt.map_or(0, |o| o.t),
            partitions: model.flow.partitions(),
            tensors,
        }
    }

    pub fn of_trainer(trainer: &Trainer) -> Self {
        Self::capture(&trainer.model, Some(&trainer.opt), trainer.step)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut manifest = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = tensor_bytes(t)?;
            manifest.push(ManifestEntry {
                name: name.clone(),
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: data.len() as u64,
                len: bytes.len() as u64,
            });
            data.extend_from_slice(&bytes);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.to_toml()?,
            shape: self.shape,
            step: self.step,
            seed: self.config.seed,
            adam_t: self.adam_t,
            partitions: self.partitions.clone(),
            manifest,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Format(e.to_string()))?;
        let data = &bytes[16 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in &header.manifest {
            let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
            let chunk = data
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("tensor {} lies outside the file", e.name)))?;
            tensors.insert(e.name.clone(), tensor_from_bytes(chunk, &e.dtype, &e.shape)?);
        }
        Ok(Self {
            config: RunConfig::from_toml(&header.config)?,
            shape: header.shape,
            step: header.step,
            adam_t: header.adam_t,
            partitions: header.partitions,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuild the model described by the snapshot and restore its parameters.
    pub fn model(&self) -> Result<JetFormer> {
        let mut model = JetFormer::build(&self.config, self.shape, None)?;
        model.flow.set_partitions(self.partitions.clone())?;
        if self.tensors.keys().filter(|k| k.starts_with(PARAM)).count() != model.store.len() {
            return Err(Error::Config("checkpoint parameters do not match the configured model".into()));
        }
        for (name, _) in model.store.iter() {
            let t = self
                .tensors
                .get(&format!("{PARAM}{name}"))
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            model.store.set(name, t)?;
        }
        Ok(model)
    }

    /// Optimizer state for `model`; fresh moments when none were saved.
    pub fn optimizer(&self, model: &JetFormer) -> Result<AdamW> {
        let mut opt = AdamW::new(OptimConfig::from_run(&self.config), &model.store)?;
        for (name, _) in model.store.iter() {
            if let (Some(m), Some(v)) = (
                self.tensors.get(&format!("{FIRST}{name}")),
                self.tensors.get(&format!("{SECOND}{name}")),
            ) {
                opt.first.insert(name.clone(), m.clone());
                opt.second.insert(name.clone(), v.clone());
            }
        }
        opt.t = self.adam_t;
        Ok(opt)
    }

    pub fn trainer(&self, data: crate::data::DatasetFile) -> Result<Trainer> {
        let model = self.model()?;
        let opt = self.optimizer(&model)?;
        Trainer::from_parts(model, Some(opt), self.step, data)
    }
}
