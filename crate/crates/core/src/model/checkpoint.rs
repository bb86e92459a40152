//! Checkpoint layout: 8 magic bytes, a little-endian `u32` header length, the
//! JSON header, then every tensor as little-endian `f32` in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState, Params, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KGDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form echo of the run configuration.
    #[serde(default)]
    pub run_config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: ModelState<f32>,
}

impl Checkpoint {
    pub fn new(state: ModelState<f32>, vocab_hash: String, run_config: serde_json::Value) -> Self {
        let tensors = state
            .params
            .named()
            .into_iter()
            .map(|(name, t)| TensorEntry { name, shape: t.shape() })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model: state.config,
                vocab_hash,
                tensors,
                run_config,
            },
            state,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + self.state.params.parameter_count() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.state.params.tensors() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        header.model.validate()?;
        let mut params = Params::<f32>::zeros(&header.model);
        let expected: Vec<TensorEntry> = params
            .named()
            .into_iter()
            .map(|(name, t)| TensorEntry { name, shape: t.shape() })
            .collect();
        if expected != header.tensors {
            return Err(bad("tensor manifest does not match the model config"));
        }
        let mut data = &bytes[12 + len..];
        for t in params.tensors_mut() {
            let need = t.len() * 4;
            if data.len() < need {
                return Err(bad("truncated tensor data"));
            }
            for (v, chunk) in t.data.iter_mut().zip(data[..need].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            data = &data[need..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if !params.all_finite() {
            return Err(bad("non-finite parameter values"));
        }
        let state = ModelState::from_params(header.model, params)?;
        Ok(Checkpoint { header, state })
    }

    /// Named tensor lookup.
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.state.params.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelState<f32> {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            vocab_size: 12,
            max_positions: 32,
            max_entity_ids: 4,
            max_triple_ids: 4,
            ..ModelConfig::default()
        };
        ModelState::new(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = Checkpoint::new(tiny(), "abc".into(), serde_json::json!({"lr": 1e-3}));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = Checkpoint::new(tiny(), "abc".into(), serde_json::Value::Null).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!").is_err());
    }
}
