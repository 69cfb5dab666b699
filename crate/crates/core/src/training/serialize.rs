//! JSON model files with a format version and a SHA-256 checksum.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tensor};
use crate::encoders::WordVectors;
use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::model::Model;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Payload {
    config: String,
    seed: u64,
    visual_dim: usize,
    words: Tensor,
    params: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    checksum: String,
    payload: Payload,
}

fn checksum(payload: &Payload) -> Result<String> {
    let bytes = serde_json::to_vec(payload)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn serialize_model(model: &Model) -> Result<String> {
    let payload = Payload {
        config: model.config.to_text(),
        seed: model.params.seed(),
        visual_dim: model.visual_dim,
        words: model.words.table().clone(),
        params: model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    };
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        checksum: checksum(&payload)?,
        payload,
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn deserialize_model(text: &str) -> Result<Model> {
    let file: ModelFile = serde_json::from_str(text)
        .map_err(|e| Error::ModelFormat(format!("corrupt model file: {e}")))?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    if checksum(&file.payload)? != file.checksum {
        return Err(Error::ModelFormat("checksum mismatch".into()));
    }
    let p = file.payload;
    let config = TrainConfig::parse(&p.config)?;
    let mut params = ParamStore::new(p.seed);
    for (name, value) in p.params {
        params.insert(name, value)?;
    }
    Ok(Model {
        config,
        words: WordVectors::new(p.words)?,
        params,
        visual_dim: p.visual_dim,
    })
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, serialize_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    deserialize_model(&std::fs::read_to_string(path)?)
}
