use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::GroundingModel;
use crate::error::{Error, Result};
use crate::numerics::{Parameterized, Tensor};

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    step: usize,
    params: Vec<ParamRecord>,
}

pub fn checkpoint_json(model: &GroundingModel, step: usize) -> Result<String> {
    let params = model
        .named_params()
        .into_iter()
        .map(|(name, p)| ParamRecord { name, shape: p.value().shape().to_vec(), data: p.value().data().to_vec() })
        .collect();
    Ok(serde_json::to_string(&CheckpointFile { config: model.cfg.clone(), step, params })?)
}

pub fn save_checkpoint(path: &Path, model: &GroundingModel, step: usize) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, checkpoint_json(model, step)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuilds the model from the stored config and overwrites every
/// parameter; names and shapes must match exactly.
pub fn load_checkpoint_str(text: &str) -> Result<(GroundingModel, usize)> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    let mut model = GroundingModel::new(&file.config)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != file.params.len() {
        return Err(Error::Config(format!("checkpoint has {} tensors, model expects {}", file.params.len(), names.len())));
    }
    for ((name, p), rec) in names.iter().zip(model.params_mut()).zip(file.params) {
        if *name != rec.name || p.value().shape() != rec.shape.as_slice() {
            return Err(Error::Config(format!("checkpoint tensor `{}` {:?} does not match `{name}` {:?}", rec.name, rec.shape, p.value().shape())));
        }
        p.set(Tensor::new(rec.shape, rec.data)?);
    }
    Ok((model, file.step))
}

pub fn load_checkpoint(path: &Path) -> Result<(GroundingModel, usize)> {
    load_checkpoint_str(&fs::read_to_string(path)?)
}
