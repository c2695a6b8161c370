//! `MUJICA1` archive: an 8-byte magic, a little-endian u64 header length,
//! a JSON header, then raw little-endian f32 tensor data.
//!
//! The header carries free-form metadata plus a tensor table of
//! `(name, shape, offset)` with offsets counted in f32 elements from the
//! start of the data section.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::Mujica;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MUJICA1\0";
pub const FORMAT: &str = "MUJICA1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("archive has no tensor `{name}`")))
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write(path: &Path, archive: &Archive) -> Result<()> {
    let mut entries = Vec::with_capacity(archive.tensors.len());
    let mut offset = 0;
    for (name, t) in &archive.tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += t.len();
    }
    let header = Header { format: FORMAT.into(), meta: archive.meta.clone(), tensors: entries };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in archive.tensors.values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Archive> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a MUJICA1 archive"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    if header.format != FORMAT {
        return Err(bad(&format!("unsupported format {}", header.format)));
    }
    let data = &bytes[data_start..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let (lo, hi) = (e.offset * 4, (e.offset + n) * 4);
        if hi > data.len() {
            return Err(bad(&format!("tensor `{}` runs past the end of the file", e.name)));
        }
        let vals = data[lo..hi]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(e.name, Tensor::from_vec(&e.shape, vals)?);
    }
    Ok(Archive { meta: header.meta, tensors })
}

/// Archive holding a model's config, parameters and frozen set; `extra`
/// entries are merged into the metadata.
pub fn model_archive(model: &Mujica<f32>, extra: &BTreeMap<String, Value>) -> Result<Archive> {
    let mut meta = serde_json::Map::new();
    meta.insert("model".into(), serde_json::to_value(&model.config)?);
    meta.insert("frozen".into(), serde_json::to_value(model.params.frozen_names())?);
    for (k, v) in extra {
        meta.insert(k.clone(), v.clone());
    }
    let tensors = model.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    Ok(Archive { meta: Value::Object(meta), tensors })
}

pub fn save_model(path: &Path, model: &Mujica<f32>) -> Result<()> {
    write(path, &model_archive(model, &BTreeMap::new())?)
}

/// Rebuilds a model from an archive; tensors outside the model's own
/// parameter set (optimizer state and the like) are ignored.
pub fn model_from_archive(archive: &Archive) -> Result<Mujica<f32>> {
    let cfg_value = archive
        .meta
        .get("model")
        .ok_or_else(|| Error::Checkpoint("archive has no model config".into()))?;
    let config: ModelConfig = serde_json::from_value(cfg_value.clone())?;
    let mut model = Mujica::<f32>::new(config, 0)?;
    let names: Vec<String> = model.params.names().cloned().collect();
    let mut params = ParamSet::new();
    for name in names {
        let t = archive.tensor(&name)?;
        if t.shape() != model.params.get(&name)?.shape() {
            return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}", t.shape())));
        }
        params.insert(name, t.clone());
    }
    let frozen: Vec<String> = match archive.meta.get("frozen") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => model.params.frozen_names(),
    };
    for f in frozen {
        params.freeze_prefix(&f);
    }
    model.params = params;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<Mujica<f32>> {
    model_from_archive(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut tensors = BTreeMap::new();
        tensors.insert("x".to_string(), Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap());
        tensors.insert("y".to_string(), Tensor::scalar(7.0));
        let a = Archive { meta: serde_json::json!({"step": 3}), tensors };
        write(&path, &a).unwrap();
        assert_eq!(read(&path).unwrap(), a);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read(&path).is_err());
        fs::write(&path, b"NOTACKPT00000000").unwrap();
        assert!(read(&path).is_err());
    }

    #[test]
    fn model_roundtrip_keeps_frozen_set() {
        let cfg = ModelConfig { channels: 8, embed_dim: 8, heads: 2, window: 4, cabs: 2, growth: 4, ffe_depth: 1, ..Default::default() };
        let model = Mujica::<f32>::new(cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, model);
    }
}
