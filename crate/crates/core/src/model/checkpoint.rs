//! Checkpoint directories: `manifest.json` plus one MMT1 blob per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::numerics::io::{load_tensor, save_tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    /// Input modality the model was trained on (`audio`, `video`, `multimodal`).
    #[serde(default)]
    pub modality: Option<String>,
    /// Phoneme symbols in label order (label `i + 1` is `symbols[i]`).
    #[serde(default)]
    pub symbols: Vec<String>,
    pub parameters: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub epoch: usize,
    pub modality: Option<String>,
    pub symbols: Vec<String>,
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut parameters = Vec::new();
        for (name, t) in self.model.params.iter() {
            let file = format!("{name}.mmt");
            save_tensor(dir.join(&file), t)?;
            parameters.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                file,
            });
        }
        let manifest = CheckpointManifest {
            config: self.model.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            modality: self.modality.clone(),
            symbols: self.symbols.clone(),
            parameters,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let mut params = ParamSet::new();
        for entry in &manifest.parameters {
            let t = load_tensor(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            params.insert(entry.name.clone(), t);
        }
        let model = Model::from_params(manifest.config, params)?;
        Ok(Self {
            model,
            seed: manifest.seed,
            epoch: manifest.epoch,
            modality: manifest.modality,
            symbols: manifest.symbols,
        })
    }
}
