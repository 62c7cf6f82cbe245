//! Binary checkpoint format.
//!
//! Layout: the header line `moon-checkpoint v1\n`, a little-endian `u64`
//! byte length, a JSON document (encoder config, metadata, tensor index and
//! payload digest), then every tensor's `f32` values little-endian in index
//! order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::Params;

pub const HEADER: &str = "moon-checkpoint v1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub step: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub format_version: u32,
}

impl CheckpointMeta {
    pub fn new(config_hash: impl Into<String>, step: usize) -> Self {
        Self {
            config_hash: config_hash.into(),
            step,
            metrics: BTreeMap::new(),
            format_version: FORMAT_VERSION,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Document {
    encoder: EncoderConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: message.into(),
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_bytes(encoder: &Encoder, meta: &CheckpointMeta) -> Vec<u8> {
    let mut payload = Vec::with_capacity(encoder.params.scalar_count() * 4);
    for t in encoder.params.tensors() {
        for v in t.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let doc = Document {
        encoder: encoder.config.clone(),
        meta: meta.clone(),
        tensors: encoder
            .params
            .names()
            .iter()
            .zip(encoder.params.tensors())
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
            })
            .collect(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&doc).expect("checkpoint document serializes");
    let mut out = Vec::with_capacity(HEADER.len() + 8 + json.len() + payload.len());
    out.extend_from_slice(HEADER.as_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(path: &Path, encoder: &Encoder, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(encoder, meta)).map_err(|e| Error::io(path, e))
}

pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<(Encoder, CheckpointMeta)> {
    let rest = bytes
        .strip_prefix(HEADER.as_bytes())
        .ok_or_else(|| parse_err(path, "missing or unsupported checkpoint header"))?;
    if rest.len() < 8 {
        return Err(parse_err(path, "truncated before document length"));
    }
    let (len_bytes, rest) = rest.split_at(8);
    let doc_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
    if rest.len() < doc_len {
        return Err(parse_err(path, "truncated document"));
    }
    let (json, payload) = rest.split_at(doc_len);
    let doc: Document = serde_json::from_slice(json).map_err(|e| parse_err(path, e.to_string()))?;
    if doc.meta.format_version != FORMAT_VERSION {
        return Err(parse_err(
            path,
            format!("format version {} is not {FORMAT_VERSION}", doc.meta.format_version),
        ));
    }
    let expected: usize = doc.tensors.iter().map(|t| t.shape[0] * t.shape[1] * 4).sum();
    if payload.len() != expected {
        return Err(parse_err(
            path,
            format!("payload has {} bytes, index describes {expected}", payload.len()),
        ));
    }
    if hex(&Sha256::digest(payload)) != doc.payload_sha256 {
        return Err(Error::Integrity(format!("{}: payload digest mismatch", path.display())));
    }
    let mut params = Params::default();
    let mut off = 0;
    for t in &doc.tensors {
        let n = t.shape[0] * t.shape[1];
        let values: Vec<f32> = payload[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        off += 4 * n;
        params.push(
            t.name.clone(),
            Array2::from_shape_vec((t.shape[0], t.shape[1]), values).expect("shape matches count"),
        );
    }
    let encoder = Encoder::from_params(doc.encoder, params)?;
    Ok((encoder, doc.meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Encoder, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(path, &bytes)
}

/// Loads a checkpoint and checks its encoder config field by field against
/// `expected`, naming the first field that differs.
pub fn load_checkpoint_expecting(path: &Path, expected: &EncoderConfig) -> Result<(Encoder, CheckpointMeta)> {
    let (encoder, meta) = load_checkpoint(path)?;
    if let Some(field) = first_difference(expected, &encoder.config) {
        return Err(Error::Integrity(format!(
            "{}: encoder config field `{field}` differs from the expected config",
            path.display()
        )));
    }
    Ok((encoder, meta))
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_owned(), other.clone());
        }
    }
}

fn first_difference(a: &EncoderConfig, b: &EncoderConfig) -> Option<String> {
    let mut fa = BTreeMap::new();
    let mut fb = BTreeMap::new();
    flatten("", &serde_json::to_value(a).expect("config"), &mut fa);
    flatten("", &serde_json::to_value(b).expect("config"), &mut fb);
    fa.iter()
        .find(|(k, v)| fb.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::MoEConfig;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 8,
            visual_tokens: 2,
            text_len: 4,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 16,
            feature_dim: 3,
            normalize_output: true,
            moe: MoEConfig {
                n_experts: 2,
                top_k: 1,
                expert_hidden: 8,
                n_objectives: 5,
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let enc = Encoder::init(tiny(), 5).unwrap();
        let mut meta = CheckpointMeta::new("abc", 12);
        meta.metrics.insert("loss".into(), 0.25);
        save_checkpoint(&path, &enc, &meta).unwrap();
        let (loaded, m) = load_checkpoint(&path).unwrap();
        assert!(loaded.params.bitwise_eq(&enc.params));
        assert_eq!(loaded.config, enc.config);
        assert_eq!(m, meta);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let enc = Encoder::init(tiny(), 5).unwrap();
        save_checkpoint(&path, &enc, &CheckpointMeta::new("abc", 0)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [5, HEADER.len() + 3, HEADER.len() + 40, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })), "cut at {cut}");
        }
    }

    #[test]
    fn corrupted_payload_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let enc = Encoder::init(tiny(), 5).unwrap();
        save_checkpoint(&path, &enc, &CheckpointMeta::new("abc", 0)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 2;
        bytes[last] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let enc = Encoder::init(tiny(), 5).unwrap();
        let mut meta = CheckpointMeta::new("abc", 0);
        meta.format_version = 2;
        let bytes = to_bytes(&enc, &meta);
        assert!(matches!(from_bytes(Path::new("x"), &bytes), Err(Error::Parse { .. })));
    }

    #[test]
    fn mismatched_config_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let enc = Encoder::init(tiny(), 5).unwrap();
        save_checkpoint(&path, &enc, &CheckpointMeta::new("abc", 0)).unwrap();
        let mut other = tiny();
        other.moe.expert_hidden = 16;
        match load_checkpoint_expecting(&path, &other) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("moe.expert_hidden"), "{msg}"),
            r => panic!("expected integrity error, got {:?}", r.map(|_| ())),
        }
        assert!(load_checkpoint_expecting(&path, &tiny()).is_ok());
    }
}
