//! Checkpoints: named tensors in the binary format plus a JSON sidecar
//! (`<path>.json`) with the model config and provenance.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{check_layout, Conditioning, Model, ModelConfig, ParamStore};
use crate::numerics::checkpoint::{read_tensors, write_tensors, NamedTensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub phase: String,
    pub seed: u64,
    pub step: u64,
    /// Hex digest of the resolved run config.
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: ModelConfig,
    pub conditioning: Conditioning,
    pub provenance: Provenance,
    /// Seconds since the Unix epoch. Kept out of the tensor file so that
    /// file is reproducible byte for byte.
    pub created_unix: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(model: &Model, path: &Path, provenance: Provenance) -> Result<()> {
    let tensors: Vec<NamedTensor> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    write_tensors(path, &tensors)?;
    let created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let sidecar = Sidecar {
        config: model.config.clone(),
        conditioning: model.conditioning,
        provenance,
        created_unix,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Sidecar)> {
    let side = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&side)?)?;
    let mut params = ParamStore::new();
    for (name, tensor) in read_tensors(path)? {
        if params.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, tensor);
    }
    let template = Model::new(sidecar.config.clone(), sidecar.conditioning, 0)?;
    check_layout(&template.params, &params)?;
    let model = Model {
        config: sidecar.config.clone(),
        conditioning: sidecar.conditioning,
        params,
    };
    Ok((model, sidecar))
}
