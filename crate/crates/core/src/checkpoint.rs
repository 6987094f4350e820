//! Model checkpoints: a JSON manifest next to one flat little-endian f32 file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, RosaError};
use crate::model::{Model, ModelConfig};
use crate::real::Real;

pub const FORMAT: &str = "rosa-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data file, in elements.
    pub offset: usize,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub data_file: String,
    pub tensors: Vec<TensorEntry>,
}

fn data_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (manifest) and `path` with a `.bin` extension (data).
pub fn save<F: Real>(model: &Model<F>, path: &Path) -> Result<Manifest> {
    let data = data_path(path);
    let mut bytes = Vec::with_capacity(4 * model.params.num_scalars());
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params.tensors() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            dtype: "f32".into(),
        });
        offset += t.len();
        for &x in t.iter() {
            bytes.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.cfg.clone(),
        data_file: data
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| RosaError::Format(format!("bad checkpoint path {}", path.display())))?
            .to_string(),
        tensors,
    };
    fs::write(&data, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load<F: Real>(path: &Path) -> Result<Model<F>> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(RosaError::Format(format!(
            "expected {FORMAT} v{VERSION}, found {} v{}",
            manifest.format, manifest.version
        )));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&manifest.data_file))?;
    if bytes.len() % 4 != 0 {
        return Err(RosaError::Format(
            "data file length is not a multiple of 4".into(),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut model = Model::<F>::new(manifest.config.clone())?;
    let mut slots = model.params.tensors_mut();
    if slots.len() != manifest.tensors.len() {
        return Err(RosaError::Format(format!(
            "manifest lists {} tensors, the config implies {}",
            manifest.tensors.len(),
            slots.len()
        )));
    }
    for ((name, dst), entry) in slots.iter_mut().zip(&manifest.tensors) {
        if *name != entry.name || dst.shape() != entry.shape.as_slice() || entry.dtype != "f32" {
            return Err(RosaError::Format(format!(
                "tensor {} {:?} does not match expected {name} {:?}",
                entry.name,
                entry.shape,
                dst.shape()
            )));
        }
        let src = values
            .get(entry.offset..entry.offset + dst.len())
            .ok_or_else(|| RosaError::Format(format!("tensor {name} runs past the data file")))?;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = F::lit(s as f64);
        }
    }
    drop(slots);
    Ok(model)
}
