//! Self-verifying encoder checkpoints.
//!
//! Layout: `b"UFSDCKPT"`, format version (u32 LE), header length (u32 LE),
//! a JSON header, every blob as little-endian f32 in
//! [`EncoderParams::visit`] order, and finally the SHA-256 of all preceding
//! bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::Blob;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UFSDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stage: String,
    pub epoch: usize,
    /// SHA-256 of the resolved experiment config text.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    encoder: EncoderConfig,
    provenance: Provenance,
    blobs: Vec<BlobEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub provenance: Provenance,
    /// Hex SHA-256 stored in the file.
    pub hash: String,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn encode_checkpoint(params: &EncoderParams, provenance: &Provenance) -> Vec<u8> {
    let mut blobs = Vec::new();
    params.visit(|name, b| {
        blobs.push(BlobEntry {
            name: name.to_string(),
            rows: b.rows,
            cols: b.cols,
        })
    });
    let header = serde_json::to_vec(&Header {
        encoder: params.config.clone(),
        provenance: provenance.clone(),
        blobs,
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    params.visit(|_, b| {
        for &v in &b.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Write the checkpoint and return its hex hash.
pub fn save_checkpoint(params: &EncoderParams, provenance: &Provenance, path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, provenance);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(hex(&bytes[bytes.len() - DIGEST_LEN..]))
}

fn decode(path: &Path, bytes: &[u8], expected: Option<&EncoderConfig>) -> Result<Checkpoint> {
    let integrity = |reason: String| Error::Integrity {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(integrity("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(integrity("content hash does not match".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(integrity(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    let header: Header = body
        .get(16..header_end)
        .ok_or_else(|| integrity("truncated header".into()))
        .and_then(|h| serde_json::from_slice(h).map_err(|e| integrity(format!("bad header: {e}"))))?;

    let config = expected.unwrap_or(&header.encoder);
    let shapes = config.blob_shapes();
    if shapes.len() != header.blobs.len() {
        return Err(integrity(format!(
            "{} blobs stored, {} expected",
            header.blobs.len(),
            shapes.len()
        )));
    }
    for ((name, shape), entry) in shapes.iter().zip(&header.blobs) {
        if *name != entry.name {
            return Err(integrity(format!("blob `{}` where `{name}` was expected", entry.name)));
        }
        if *shape != (entry.rows, entry.cols) {
            return Err(Error::DimensionMismatch {
                blob: name.clone(),
                expected: *shape,
                found: (entry.rows, entry.cols),
            });
        }
    }
    let total: usize = shapes.iter().map(|(_, (r, c))| r * c).sum();
    let payload = &body[header_end..];
    if payload.len() != 4 * total {
        return Err(integrity(format!("payload holds {} bytes, blobs need {}", payload.len(), 4 * total)));
    }
    let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut params = crate::encoder::init_encoder(&header.encoder, 0)?;
    params.visit_mut(|_, b: &mut Blob| {
        for v in b.data.iter_mut() {
            *v = values.next().expect("payload length checked");
        }
    });
    Ok(Checkpoint {
        params,
        provenance: header.provenance,
        hash: hex(digest),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = read(path)?;
    decode(path, &bytes, None)
}

/// Load and require every blob to have the shape `expected` implies.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: &EncoderConfig) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let ckpt = decode(path, &bytes, Some(expected))?;
    if ckpt.params.config != *expected {
        return Err(Error::Config(format!(
            "checkpoint {} holds a {:?} encoder, expected {:?}",
            path.display(),
            ckpt.params.config,
            expected
        )));
    }
    Ok(ckpt)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            what: "checkpoint".into(),
        });
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;

    fn prov() -> Provenance {
        Provenance {
            stage: "test".into(),
            epoch: 3,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn round_trip_rounds_to_f32_once() {
        let p = init_encoder(&EncoderConfig::desk(4), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let hash = save_checkpoint(&p, &prov(), &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded.hash, hash);
        assert_eq!(loaded.provenance, prov());
        let mut rounded = p.clone();
        rounded.visit_mut(|_, b| b.data.iter_mut().for_each(|v| *v = *v as f32 as f64));
        assert_eq!(loaded.params, rounded);
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let p = init_encoder(&EncoderConfig::desk(2), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        save_checkpoint(&p, &prov(), &a).unwrap();
        let bytes = fs::read(&a).unwrap();
        fs::write(&a, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&a), Err(Error::Integrity { .. })));
        fs::write(&a, b"short").unwrap();
        assert!(matches!(load_checkpoint(&a), Err(Error::Integrity { .. })));
    }

    #[test]
    fn missing_file_names_the_artifact() {
        let err = load_checkpoint("/nonexistent/x.ckpt").unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { .. }));
    }
}
