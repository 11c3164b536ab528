//! Safetensors checkpoints with the model and adapter configuration stored
//! in the file header.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device};
use safetensors::SafeTensors;

use super::config::{LoraConfig, ModelConfig};
use super::layers::ParamMap;
use super::vit::BodyTransformer;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "crossband-body-transformer";
pub const CHECKPOINT_VERSION: &str = "1";

/// Configuration recovered from a checkpoint header.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub dtype: DType,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_dtype(s: &str) -> Option<DType> {
    match s {
        "f32" => Some(DType::F32),
        "f64" => Some(DType::F64),
        _ => None,
    }
}

/// Writes all base and adapter weights. The file appears atomically.
pub fn save_checkpoint(model: &BodyTransformer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
    meta.insert(
        "model_config".to_string(),
        serde_json::to_string(model.config())?,
    );
    meta.insert(
        "lora_config".to_string(),
        serde_json::to_string(&model.lora_config())?,
    );
    meta.insert("dtype".to_string(), model.dtype().as_str().to_string());
    let state = model.state()?;
    let bytes = safetensors::serialize(state.iter(), Some(meta))
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    let tmp = path.with_extension("safetensors.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_header(path: &Path, bytes: &[u8]) -> Result<CheckpointHeader> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let info = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| ckpt_err(path, "no header metadata"))?;
    let field = |k: &str| {
        info.get(k)
            .ok_or_else(|| ckpt_err(path, format!("header lacks `{k}`")))
    };
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(ckpt_err(
            path,
            format!("unknown format `{}`", field("format")?),
        ));
    }
    if field("version")? != CHECKPOINT_VERSION {
        return Err(ckpt_err(
            path,
            format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                field("version")?
            ),
        ));
    }
    let dtype_str = field("dtype")?;
    let dtype = parse_dtype(dtype_str)
        .ok_or_else(|| ckpt_err(path, format!("unsupported dtype `{dtype_str}`")))?;
    let model: ModelConfig = serde_json::from_str(field("model_config")?)
        .map_err(|e| ckpt_err(path, format!("model_config: {e}")))?;
    let lora: Option<LoraConfig> = serde_json::from_str(field("lora_config")?)
        .map_err(|e| ckpt_err(path, format!("lora_config: {e}")))?;
    Ok(CheckpointHeader { model, lora, dtype })
}

pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_header(path, &bytes)
}

/// Restores a model exactly as saved, adapters included.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BodyTransformer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = read_header(path, &bytes)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let params: ParamMap = tensors.into_iter().collect();
    let mut model = BodyTransformer::from_params(&header.model, &params)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    if let Some(lora) = &header.lora {
        model.apply_lora(lora)?;
        model
            .set_lora_state(&params)
            .map_err(|e| ckpt_err(path, e.to_string()))?;
    }
    Ok(model)
}

/// Loads a checkpoint and fails unless its stored configuration equals the
/// expected one.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    model: &ModelConfig,
    lora: Option<&LoraConfig>,
) -> Result<BodyTransformer> {
    let path = path.as_ref();
    let header = read_checkpoint_header(path)?;
    if &header.model != model {
        return Err(ckpt_err(
            path,
            format!(
                "model config mismatch: checkpoint has {}, expected {}",
                serde_json::to_string(&header.model)?,
                serde_json::to_string(model)?
            ),
        ));
    }
    if header.lora.as_ref() != lora {
        return Err(ckpt_err(
            path,
            format!(
                "LoRA config mismatch: checkpoint has {:?}, expected {lora:?}",
                header.lora
            ),
        ));
    }
    load_checkpoint(path)
}
