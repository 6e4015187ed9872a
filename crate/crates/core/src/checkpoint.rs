//! Versioned binary parameter checkpoints.
//!
//! Layout: the 8-byte magic `LSGCNCKP`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON [`Header`], then every tensor's
//! data as little-endian `f64` in header order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layer::PositionTable;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Tensor, TensorError};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"LSGCNCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Provenance stored next to the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub positions: Vec<PositionTable>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: CheckpointMeta,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams, meta: &CheckpointMeta) -> io::Result<()> {
    let named = params.named_tensors();
    let header = Header {
        config: params.config.clone(),
        meta: meta.clone(),
        positions: params.layers.iter().map(|l| l.positions.clone()).collect(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in &named {
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

fn malformed(e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Malformed(e.to_string())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(malformed)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(malformed)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(malformed)?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(malformed)?;
    let header: Header = serde_json::from_slice(&json).map_err(malformed)?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| malformed(format!("tensor {}: {e}", entry.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(malformed)?;
    if !rest.is_empty() {
        return Err(malformed(format!("{} trailing bytes", rest.len())));
    }

    let params = ModelParams::from_tensors(&header.config, header.positions, tensors)?;
    let expected: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
    let actual = params.named_tensors();
    if let Some(((name, _), want)) = actual.iter().zip(&expected).find(|((n, _), w)| n != *w) {
        return Err(malformed(format!("tensor {want:?} stored where {name:?} belongs")));
    }
    Ok(Checkpoint {
        params,
        meta: header.meta,
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    write_checkpoint(io::BufWriter::new(file), params, meta).map_err(io_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(io::BufReader::new(file))
}
