//! JSON checkpoints holding the model config and every parameter tensor.
//! Floats are written with round-trip precision, so save/load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TiVaT};
use crate::tensor::Tensor;

pub const FORMAT: &str = "tivat-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub num_variates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &TiVaT, data: Option<&DataConfig>) -> Self {
        let tensors = model
            .store
            .names()
            .iter()
            .zip(model.store.tensors())
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config.clone(),
            num_variates: model.num_variates,
            data: data.cloned(),
            tensors,
        }
    }

    /// Rebuilds the model; every stored tensor must match the layout the
    /// config implies, by name and shape.
    pub fn into_model(self) -> Result<TiVaT> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        let mut model = TiVaT::new(self.config, self.num_variates)?;
        if self.tensors.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                self.tensors.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, t) in ids.into_iter().zip(self.tensors) {
            let slot = model.store.get(id);
            if model.store.name(id) != t.name || slot.shape() != t.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not fit `{}` {:?}",
                    t.name,
                    t.shape,
                    model.store.name(id),
                    slot.shape()
                )));
            }
            *model.store.get_mut(id) = Tensor::new(t.shape, t.data)?;
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &TiVaT, data: Option<&DataConfig>, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from_model(model, data))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<(TiVaT, Option<DataConfig>)> {
    let ck = read_checkpoint(path)?;
    let data = ck.data.clone();
    Ok((ck.into_model()?, data))
}
