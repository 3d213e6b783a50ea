//! Named-tensor archive.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header, then every tensor as little-endian `f32` in header
//! order. The header carries free-form metadata (architecture config, run
//! info) plus `{name, shape, offset}` for each tensor; `offset` counts `f32`
//! elements from the start of the payload.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, FersnetModel};
use crate::nn::param::Module;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"FERSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Archive {
    pub header: Header,
    pub payload: Vec<f32>,
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Option<Tensor<f32>> {
        let e = self.header.tensors.iter().find(|e| e.name == name)?;
        let n: usize = e.shape.iter().product();
        Tensor::from_vec(&e.shape, self.payload[e.offset..e.offset + n].to_vec()).ok()
    }
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode<T: Scalar>(module: &impl Module<T>, meta: serde_json::Value) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    module.visit("", &mut |name, p| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend(p.value.data().iter().map(|v| v.as_f64() as f32));
    });
    let header = serde_json::to_vec(&Header { meta, tensors }).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ck("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ck(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(ck("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| ck(format!("malformed header: {e}")))?;
    let raw = &body[hlen..];
    if raw.len() % 4 != 0 {
        return Err(ck("payload is not a whole number of f32 values"));
    }
    let payload: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(ck(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        if e.offset + n > payload.len() {
            return Err(ck(format!("{}: payload truncated", e.name)));
        }
    }
    Ok(Archive { header, payload })
}

/// Copy archive tensors into `module`. Every parameter must be present with
/// the same shape; extra archive entries are an error too.
pub fn restore<T: Scalar>(module: &mut impl Module<T>, archive: &Archive) -> Result<()> {
    let mut problems = Vec::new();
    let mut seen = 0;
    module.visit_mut("", &mut |name, p| match archive.header.tensors.iter().find(|e| e.name == name) {
        None => problems.push(format!("missing tensor {name}")),
        Some(e) if e.shape != p.value.shape() => {
            problems.push(format!("{name}: shape {:?} in file, {:?} in model", e.shape, p.value.shape()))
        }
        Some(e) => {
            seen += 1;
            let src = &archive.payload[e.offset..e.offset + p.value.len()];
            for (d, s) in p.value.data_mut().iter_mut().zip(src) {
                *d = T::lit(*s as f64);
            }
            p.zero_grad();
        }
    });
    if seen != archive.header.tensors.len() && problems.is_empty() {
        problems.push(format!("file has {} tensors, model has {seen}", archive.header.tensors.len()));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(ck(problems.join("; ")))
    }
}

pub fn save<T: Scalar>(path: &Path, module: &impl Module<T>, meta: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(module, meta)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_model(path: &Path, model: &FersnetModel<f32>, extra: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({ "kind": "fersnet", "arch": model.config, "extra": extra });
    save(path, model, meta)
}

/// Rebuild a model from the architecture stored in the header, then fill in
/// the weights.
pub fn load_model(path: &Path) -> Result<(FersnetModel<f32>, serde_json::Value)> {
    let archive = load(path)?;
    let meta = &archive.header.meta;
    if meta.get("kind").and_then(|k| k.as_str()) != Some("fersnet") {
        return Err(ck(format!("{}: not a model checkpoint", path.display())));
    }
    let arch: ArchConfig = serde_json::from_value(meta["arch"].clone())
        .map_err(|e| ck(format!("{}: bad architecture metadata: {e}", path.display())))?;
    let mut model = FersnetModel::new(arch, &mut ChaCha8Rng::seed_from_u64(0))?;
    restore(&mut model, &archive)?;
    Ok((model, meta.get("extra").cloned().unwrap_or(serde_json::Value::Null)))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Linear;
    use crate::nn::param::param_hash;

    #[test]
    fn round_trip_preserves_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Linear::<f32>::new(5, 3, &mut rng);
        let bytes = encode(&a, serde_json::json!({"note": "x"}));
        let archive = decode(&bytes).unwrap();
        assert_eq!(archive.header.meta["note"], "x");
        let mut b = Linear::<f32>::new(5, 3, &mut rng);
        assert_ne!(param_hash(&a), param_hash(&b));
        restore(&mut b, &archive).unwrap();
        assert_eq!(param_hash(&a), param_hash(&b));
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Linear::<f32>::new(4, 2, &mut rng);
        let bytes = encode(&a, serde_json::Value::Null);
        assert!(decode(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut future = bytes.clone();
        future[8] = 9;
        assert!(decode(&future).unwrap_err().to_string().contains("version"));
        let mut other = Linear::<f32>::new(4, 3, &mut rng);
        assert!(restore(&mut other, &decode(&bytes).unwrap()).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ArchConfig { image_size: 32, ladder: [4, 4, 8, 8], ..Default::default() };
        let model = FersnetModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        save_model(&path, &model, serde_json::json!({"epochs": 3})).unwrap();
        let (back, extra) = load_model(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(extra["epochs"], 3);
        assert_eq!(param_hash(&model), param_hash(&back));
        assert_eq!(file_sha256(&path).unwrap().len(), 64);
    }
}
