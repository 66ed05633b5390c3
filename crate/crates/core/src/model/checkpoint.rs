use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{LabError, Result};
use crate::tensorops::Tensor;

const MAGIC: &[u8; 8] = b"SLCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    /// Digest of the factor catalog the model was trained against.
    pub catalog_hash: String,
    pub epoch: usize,
    pub params: Vec<ParamInfo>,
    /// [`ModelParams::checksum`] of the stored values, hex.
    pub checksum: String,
}

/// Write `magic | header length (u64 LE) | JSON header | f64 LE values`.
pub fn save_checkpoint(path: &Path, params: &ModelParams, seed: u64, catalog_hash: &str, epoch: usize) -> Result<()> {
    let header = CheckpointHeader {
        config: params.config.clone(),
        seed,
        catalog_hash: catalog_hash.to_string(),
        epoch,
        params: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(name, t)| ParamInfo { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
        checksum: format!("{:016x}", params.checksum()),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + params.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(LabError::Data("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(LabError::Data("checkpoint header truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
    Ok((header, &body[len..]))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(split_header(&fs::read(path)?)?.0)
}

/// Load and verify a checkpoint; a payload that does not match the stored checksum is rejected.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    let bytes = fs::read(path)?;
    let (header, payload) = split_header(&bytes)?;
    let mut params = ModelParams::zeros(&header.config)?;
    let layout_matches = params.tensors.len() == header.params.len()
        && params
            .tensors
            .iter()
            .zip(&params.names)
            .zip(&header.params)
            .all(|((t, n), info)| t.shape() == info.shape.as_slice() && *n == info.name);
    if !layout_matches {
        return Err(LabError::Data("checkpoint layout does not match its configuration".into()));
    }
    if payload.len() != params.parameter_count() * 8 {
        return Err(LabError::Data(format!(
            "checkpoint payload has {} bytes, expected {}",
            payload.len(),
            params.parameter_count() * 8
        )));
    }
    let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in &mut params.tensors {
        let values: Vec<f64> = chunks.by_ref().take(t.len()).collect();
        *t = Tensor::new(t.shape().to_vec(), values)?;
    }
    let expected =
        u64::from_str_radix(&header.checksum, 16).map_err(|e| LabError::Data(format!("bad checksum field: {e}")))?;
    let found = params.checksum();
    if expected != found {
        return Err(LabError::Checksum { expected, found });
    }
    Ok((header, params))
}
