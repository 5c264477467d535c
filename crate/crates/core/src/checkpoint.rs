//! Single-file checkpoints: safetensors parameter blobs plus a JSON metadata
//! header carrying configs, step counters and the recent loss history.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::losses::LossBundle;
use crate::models::{Generator, GeneratorConfig};
use crate::nn::ParamStore;

/// Major format version; readers accept any file with the same major.
pub const FORMAT_VERSION: u32 = 1;

const META_KEY: &str = "sector_outpaint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: u64,
    pub seed: u64,
    pub config: PipelineConfig,
    pub generator_parameters: usize,
    pub discriminator_parameters: usize,
    pub adam_g_step: u64,
    pub adam_d_step: u64,
    pub loss_history: Vec<LossBundle>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn ck_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes atomically (temp file in the same directory, then rename).
pub fn save(path: &Path, meta: &CheckpointMeta, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    info.insert("format_version".to_string(), meta.format_version.to_string());
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(tensors.iter(), Some(info), &tmp)
        .map_err(|e| ck_err(path, e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    meta_from_bytes(path, &bytes)
}

fn meta_from_bytes(path: &Path, bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| ck_err(path, e.to_string()))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| ck_err(path, "no metadata header; not a checkpoint of this tool"))?;
    let raw = info
        .get(META_KEY)
        .ok_or_else(|| ck_err(path, "no metadata header; not a checkpoint of this tool"))?;
    let meta: CheckpointMeta = serde_json::from_str(raw).map_err(|e| ck_err(path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(ck_err(
            path,
            format!(
                "format version {} is not readable by this build (expects {FORMAT_VERSION})",
                meta.format_version
            ),
        ));
    }
    Ok(meta)
}

pub fn load(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta = meta_from_bytes(path, &bytes)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)
        .map_err(|e| ck_err(path, e.to_string()))?
        .into_iter()
        .collect();
    Ok(Checkpoint { meta, tensors })
}

/// Rebuilds the generator stored in a checkpoint for inference.
pub fn load_generator(path: &Path, device: &Device) -> Result<(Generator, ParamStore, CheckpointMeta)> {
    let ck = load(path, device)?;
    let (g, store) = generator_from(&ck.meta.config.generator, &ck.tensors, device)?;
    Ok((g, store, ck.meta))
}

pub(crate) fn generator_from(
    config: &GeneratorConfig,
    tensors: &BTreeMap<String, Tensor>,
    device: &Device,
) -> Result<(Generator, ParamStore)> {
    let mut store = ParamStore::new(device);
    // initial values are overwritten right away
    let g = Generator::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.assign(tensors, "")?;
    Ok((g, store))
}
