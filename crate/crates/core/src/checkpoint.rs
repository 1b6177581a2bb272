//! Checkpoint directories: `manifest.json` plus a flat little-endian `f32`
//! blob `tensors.bin`, tensors stored in name order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::worldmodel::{ModelConfig, ParamSet, WorldModel};

pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `tensors.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn from_model(model: &WorldModel, step: u64) -> Self {
        Self {
            config: model.config.clone(),
            step,
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<WorldModel> {
        WorldModel::from_params(self.config, self.params)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: blob.len() as u64,
            });
            for &x in t.data() {
                blob.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            config: self.config.clone(),
            step: self.step,
            tensors,
        };
        fs::write(dir.join(TENSORS), blob)?;
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        let blob = fs::read(dir.join(TENSORS))?;
        let mut params = ParamSet::new();
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::invalid(format!(
                    "tensor `{}` has unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            let bytes = blob.get(start..end).ok_or_else(|| {
                Error::shape(format!("tensor `{}` runs past the end of {TENSORS}", e.name))
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(Self {
            config: manifest.config,
            step: manifest.step,
            params,
        })
    }
}

/// Round every parameter to `f32`, the precision checkpoints are stored at.
pub fn quantize(params: &mut ParamSet) {
    for t in params.values_mut() {
        for x in t.data_mut() {
            *x = *x as f32 as f64;
        }
    }
}
