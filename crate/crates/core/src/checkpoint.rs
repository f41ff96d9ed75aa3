//! Single-file checkpoint container.
//!
//! Layout: `b"ABSB"`, format version (u32 LE), header length (u64 LE), JSON
//! header, then every tensor as packed f32 LE in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ABSB";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub provenance: Provenance,
    pub tensors: IndexMap<String, TensorEntry>,
}

fn build_header(weights: &ModelWeights, provenance: &Provenance) -> CheckpointHeader {
    let mut offset = 0u64;
    let tensors = weights
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let length = 4 * t.numel() as u64;
            let entry = TensorEntry { dtype: "f32".into(), shape: t.shape().to_vec(), offset, length };
            offset += length;
            (name, entry)
        })
        .collect();
    CheckpointHeader { config: weights.config.clone(), provenance: provenance.clone(), tensors }
}

/// Encode to the on-disk byte layout.
pub fn encode_checkpoint(weights: &ModelWeights, provenance: &Provenance) -> Vec<u8> {
    let header = serde_json::to_vec(&build_header(weights, provenance)).expect("plain data");
    let payload: usize = weights.named_tensors().iter().map(|(_, t)| 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in weights.named_tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save_checkpoint(weights: &ModelWeights, provenance: &Provenance, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(weights, provenance);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        // Temp files are created owner-only; a saved model is an ordinary file.
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644)).map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::Corrupt { path: path.to_path_buf(), detail: detail.into() }
}

/// Validate magic and version, then parse the header.
pub fn decode_header(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < PREAMBLE {
        return Err(corrupt(path, format!("file is {} bytes, shorter than the preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(path, "bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), found: version, expected: FORMAT_VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload_start = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| corrupt(path, format!("header length {header_len} runs past end of file")))?
        as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
        .map_err(|e| corrupt(path, format!("unreadable header: {e}")))?;
    Ok((header, payload_start))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ModelWeights, CheckpointHeader)> {
    let (header, start) = decode_header(bytes, path)?;
    let payload = &bytes[start..];
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, e) in &header.tensors {
        if e.dtype != "f32" {
            return Err(corrupt(path, format!("tensor '{name}' has unsupported dtype {}", e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.length != 4 * numel as u64 {
            return Err(corrupt(path, format!("tensor '{name}' has inconsistent offset/length")));
        }
        let end = e.offset + e.length;
        if end > payload.len() as u64 {
            return Err(corrupt(path, format!("payload truncated inside tensor '{name}'")));
        }
        let data = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name.clone(), Tensor::new(e.shape.clone(), data)?));
        expected_offset = end;
    }
    if expected_offset != payload.len() as u64 {
        return Err(corrupt(
            path,
            format!("{} trailing payload bytes", payload.len() as u64 - expected_offset),
        ));
    }
    let weights = ModelWeights::from_tensors(header.config.clone(), tensors)
        .map_err(|e| corrupt(path, e.to_string()))?;
    if !weights.all_finite() {
        return Err(corrupt(path, "non-finite parameter values"));
    }
    Ok((weights, header))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelWeights, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Header only, for inspection.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_header(&bytes, path)?.0)
}
