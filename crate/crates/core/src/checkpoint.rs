//! Versioned JSON checkpoints with a SHA-256 checksum over the payload.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so `load(save(m))` reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PolicyModel};
use crate::numerics::Tensor;
use crate::training::TrainConfig;

pub const FORMAT: &str = "tldpo-checkpoint";
pub const VERSION: u32 = 1;

/// Where a checkpoint came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Optimizer steps taken since initialization.
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Body {
    format: String,
    version: u32,
    model: ModelConfig,
    provenance: Provenance,
    params: Vec<NamedParam>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    #[serde(flatten)]
    body: Body,
    checksum: String,
}

fn digest(body: &Body) -> Result<String> {
    let bytes = serde_json::to_vec(body)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Serializes a model and its provenance.
pub fn to_bytes(model: &PolicyModel, provenance: &Provenance) -> Result<Vec<u8>> {
    let params = model
        .config()
        .param_layout()
        .into_iter()
        .zip(model.params())
        .map(|((name, shape), t)| NamedParam {
            name,
            shape,
            values: t.data().to_vec(),
        })
        .collect();
    let body = Body {
        format: FORMAT.to_string(),
        version: VERSION,
        model: model.config().clone(),
        provenance: provenance.clone(),
        params,
    };
    let checksum = digest(&body)?;
    let mut out = serde_json::to_vec(&Envelope { body, checksum })?;
    out.push(b'\n');
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(PolicyModel, Provenance)> {
    // Check the header before the full parse so that version errors are
    // reported even when the layout changed.
    let header: serde_json::Value = serde_json::from_slice(bytes)?;
    if header.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(Error::Checkpoint("not a tldpo checkpoint".into()));
    }
    match header.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "unsupported version {v} (this build reads version {VERSION})"
            )))
        }
        None => return Err(Error::Checkpoint("missing version".into())),
    }
    let env: Envelope = serde_json::from_value(header)?;
    let found = digest(&env.body)?;
    if found != env.checksum {
        return Err(Error::Checksum {
            expected: env.checksum,
            found,
        });
    }
    let layout = env.body.model.param_layout();
    if layout.len() != env.body.params.len() {
        return Err(Error::Checkpoint("parameter count does not match the model config".into()));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, _), p) in layout.iter().zip(env.body.params) {
        if *name != p.name {
            return Err(Error::Checkpoint(format!("expected parameter {name}, found {}", p.name)));
        }
        tensors.push(Tensor::new(p.shape, p.values)?);
    }
    let model = PolicyModel::from_params(env.body.model, tensors)?;
    Ok((model, env.body.provenance))
}

pub fn save_checkpoint(model: &PolicyModel, provenance: &Provenance, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, provenance)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyModel, Provenance)> {
    from_bytes(&std::fs::read(path)?)
}
