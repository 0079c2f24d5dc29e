//! Checkpoints: every named parameter tensor plus a JSON echo of the configuration.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hoi_core::model::{Model, ModelConfig};
use hoi_core::splits::SplitSpec;
use hoi_core::train::TrainConfig;
use hoi_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::isaf::{IsafFile, Kind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub num_objects: usize,
    pub num_columns: usize,
    /// Fusion exponent used by `predict` unless overridden.
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
}

pub fn save(path: &Path, model: &Model, config: &CheckpointConfig) -> Result<()> {
    let mut f = IsafFile::new(Kind::Checkpoint);
    f.header.config = Some(serde_json::to_value(config)?);
    for (name, t) in model.named_params() {
        f.push(name, t.shape(), t.data());
    }
    f.write(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, CheckpointConfig)> {
    let f = IsafFile::read(path).with_context(|| format!("reading {}", path.display()))?;
    f.expect_kind(Kind::Checkpoint)?;
    let Some(config) = f.header.config.clone() else {
        bail!("checkpoint {} has no configuration", path.display());
    };
    let config: CheckpointConfig = serde_json::from_value(config).context("parsing checkpoint configuration")?;
    let mut model = Model::build(config.model.clone(), config.num_objects, config.num_columns, 0)?;
    let mut params = Vec::with_capacity(f.header.tensors.len());
    for entry in &f.header.tensors {
        let (shape, data) = f.tensor(&entry.name)?;
        params.push((entry.name.clone(), Tensor::new(&shape, data)?));
    }
    model
        .load_params(params)
        .with_context(|| format!("checkpoint {} does not match its configuration", path.display()))?;
    Ok((model, config))
}
