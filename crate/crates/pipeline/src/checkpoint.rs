//! Checkpoint file: magic, little-endian header length, JSON header, then the
//! raw little-endian `f32` data of every tensor in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{PipelineError, Result};

pub const MAGIC: &[u8; 8] = b"SPCKPT\x00\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub config: TrainConfig,
    pub skeleton_toml: String,
    /// Sorted by name.
    pub params: Vec<TensorRecord>,
    pub optimizer_step: u64,
    /// Adam moments, sorted by name.
    pub optimizer: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    stage: u8,
    config_hash: String,
    config: String,
    skeleton: String,
    optimizer_step: u64,
    params: Vec<Entry>,
    optimizer: Vec<Entry>,
}

fn entries(records: &[TensorRecord]) -> Vec<Entry> {
    records
        .iter()
        .map(|r| Entry {
            name: r.name.clone(),
            shape: r.shape.clone(),
        })
        .collect()
}

fn format_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Data(format!("checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            config_hash: self.config_hash(),
            config: self.config.to_toml(),
            skeleton: self.skeleton_toml.clone(),
            optimizer_step: self.optimizer_step,
            params: entries(&self.params),
            optimizer: entries(&self.optimizer),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for r in self.params.iter().chain(&self.optimizer) {
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(format_err("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| format_err("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| format_err(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {}", header.format_version)));
        }
        let config = TrainConfig::from_toml(&header.config)?;
        if config.hash() != header.config_hash {
            return Err(format_err("config hash mismatch"));
        }
        let mut data = &bytes[16 + len..];
        let mut read = |list: Vec<Entry>| -> Result<Vec<TensorRecord>> {
            list.into_iter()
                .map(|e| {
                    let n: usize = e.shape.iter().product();
                    if data.len() < 4 * n {
                        return Err(format_err(format!("truncated tensor {}", e.name)));
                    }
                    let values = data[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    data = &data[4 * n..];
                    Ok(TensorRecord {
                        name: e.name,
                        shape: e.shape,
                        data: values,
                    })
                })
                .collect()
        };
        let params = read(header.params)?;
        let optimizer = read(header.optimizer)?;
        if !data.is_empty() {
            return Err(format_err("trailing bytes"));
        }
        Ok(Self {
            stage: header.stage,
            config,
            skeleton_toml: header.skeleton,
            params,
            optimizer_step: header.optimizer_step,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(PipelineError::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(PipelineError::io(path))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            stage: 2,
            config: TrainConfig::default(),
            skeleton_toml: "x = 1\n".into(),
            params: vec![
                TensorRecord { name: "a".into(), shape: vec![2, 2], data: vec![1.0, -2.5, f32::MIN_POSITIVE, 3.0e7] },
                TensorRecord { name: "b".into(), shape: vec![1], data: vec![0.1] },
            ],
            optimizer_step: 17,
            optimizer: vec![TensorRecord { name: "m/a".into(), shape: vec![3], data: vec![0.0, 1.0, 2.0] }],
        }
    }

    #[test]
    fn byte_stable_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
