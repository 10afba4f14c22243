//! On-disk models: one FMT1 file per parameter tensor plus a JSON manifest
//! naming each file, its role and its shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt1::{self, Array};
use crate::mrl::{MrlModel, ScaleHead, TrainConfig};
use crate::tensor::ChannelVector;

pub const MANIFEST: &str = "manifest.json";
pub const MODEL_FORMAT: &str = "fmvr-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub role: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub config: TrainConfig,
    pub loss_weights: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

fn put(dir: &Path, entries: &mut Vec<TensorEntry>, file: String, role: String, a: Array) -> Result<()> {
    fmt1::write_array(dir.join(&file), &a)?;
    entries.push(TensorEntry {
        file,
        role,
        shape: a.dims,
    });
    Ok(())
}

/// Writes `model` into `dir`, creating it if needed. `config` is the run
/// that produced the model; it carries the architecture for reloading.
pub fn save_model(dir: impl AsRef<Path>, model: &MrlModel, config: &TrainConfig) -> Result<ModelManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (e, p) in model.pyramid.level_params.iter().enumerate() {
        let side = model.pyramid.sides()[e];
        put(dir, &mut tensors, format!("level{e}_w_a.fmt1"), format!("level {e} ({side}x{side}) high-frequency modulation w_a"), Array::vector(p.w_a_high.as_slice().to_vec()))?;
        put(dir, &mut tensors, format!("level{e}_w_m.fmt1"), format!("level {e} ({side}x{side}) low-frequency modulation w_m"), Array::vector(p.w_m_low.as_slice().to_vec()))?;
    }
    for (e, h) in model.heads.iter().enumerate() {
        put(dir, &mut tensors, format!("head{e}_weight.fmt1"), format!("level {e} head weight (classes x channels)"), Array::new(vec![h.num_classes, h.channels], h.weight.clone())?)?;
        put(dir, &mut tensors, format!("head{e}_bias.fmt1"), format!("level {e} head bias"), Array::vector(h.bias.clone()))?;
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        config: config.clone(),
        loss_weights: model.loss_weights.clone(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST), json)?;
    Ok(manifest)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(MrlModel, ModelManifest)> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::Format(format!("unknown model format {:?}", manifest.format)));
    }
    let mut model = manifest.config.model()?;
    let read = |file: &str, dims: &[usize]| -> Result<Vec<f64>> {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.file == file)
            .ok_or_else(|| Error::Format(format!("manifest lacks {file}")))?;
        let a = fmt1::read_array(dir.join(&entry.file))?;
        if a.dims != dims || entry.shape != dims {
            return Err(Error::shape(format!("{file}: expected {dims:?}, found {:?}", a.dims)));
        }
        Ok(a.data)
    };
    let c = model.pyramid.channels;
    let k = model.num_classes();
    for e in 0..model.num_levels() {
        let p = &mut model.pyramid.level_params[e];
        p.w_a_high = ChannelVector::new(read(&format!("level{e}_w_a.fmt1"), &[c])?)?;
        p.w_m_low = ChannelVector::new(read(&format!("level{e}_w_m.fmt1"), &[c])?)?;
        model.heads[e] = ScaleHead {
            num_classes: k,
            channels: c,
            weight: read(&format!("head{e}_weight.fmt1"), &[k, c])?,
            bias: read(&format!("head{e}_bias.fmt1"), &[k])?,
        };
    }
    model = model.with_loss_weights(manifest.loss_weights.clone())?;
    Ok((model, manifest))
}
