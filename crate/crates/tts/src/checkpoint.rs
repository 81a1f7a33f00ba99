//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, 32-byte SHA-256 of the payload, then
//! the payload: `u32` header length, header JSON (model config and training
//! metadata), `u32` tensor count and per tensor a `u32` name length, the
//! UTF-8 name, `u32` rank, `u64` dimensions and little-endian `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::TtsError;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PRSDYCKP";
pub const VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    /// Training random stream: hex seed and word position.
    pub rng_seed: String,
    pub rng_word_pos: String,
    /// Digest of the normalization statistics the model was trained with.
    pub stats_digest: Option<String>,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self { step: 0, rng_seed: hex::encode([0u8; 32]), rng_word_pos: "0".into(), stats_digest: None }
    }
}

impl CheckpointMeta {
    pub fn rng(&self) -> Result<([u8; 32], u128), TtsError> {
        let bytes = hex::decode(&self.rng_seed).map_err(|e| TtsError::Malformed(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| TtsError::Malformed("rng seed must be 32 bytes".into()))?;
        let pos = self.rng_word_pos.parse().map_err(|e| TtsError::Malformed(format!("rng position: {e}")))?;
        Ok((seed, pos))
    }

    pub fn with_rng(mut self, seed: [u8; 32], word_pos: u128) -> Self {
        self.rng_seed = hex::encode(seed);
        self.rng_word_pos = word_pos.to_string();
        self
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

pub fn encode_checkpoint(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>, TtsError> {
    let header = serde_json::to_vec(&Header { config: model.config().clone(), meta: meta.clone() })?;
    let mut payload = Vec::new();
    payload.extend((header.len() as u32).to_le_bytes());
    payload.extend(&header);
    let params = model.params();
    payload.extend((params.len() as u32).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        let t = params.get(id);
        payload.extend((name.len() as u32).to_le_bytes());
        payload.extend(name);
        payload.extend(2u32.to_le_bytes());
        payload.extend((t.rows as u64).to_le_bytes());
        payload.extend((t.cols as u64).to_le_bytes());
        for v in &t.data {
            payload.extend(v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(PREFIX + payload.len());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(Sha256::digest(&payload));
    out.extend(payload);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TtsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| TtsError::Malformed("unexpected end of payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TtsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TtsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TtsError> {
    if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] != MAGIC {
        return Err(TtsError::BadMagic);
    }
    if bytes.len() < PREFIX {
        return Err(TtsError::Checksum);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(TtsError::Version { found: version, expected: VERSION });
    }
    let payload = &bytes[PREFIX..];
    if Sha256::digest(payload).as_slice() != &bytes[12..PREFIX] {
        return Err(TtsError::Checksum);
    }
    let mut r = Reader { buf: payload, pos: 0 };
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| TtsError::Malformed("tensor name is not UTF-8".into()))?;
        if r.u32()? != 2 {
            return Err(TtsError::Malformed(format!("{name}: only rank-2 tensors are stored")));
        }
        let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
        let n = rows.checked_mul(cols).ok_or_else(|| TtsError::Malformed(format!("{name}: size overflow")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| TtsError::Malformed(format!("{name}: size overflow")))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((name, Tensor::new(rows, cols, data)));
    }
    if r.pos != payload.len() {
        return Err(TtsError::Malformed("trailing bytes after the last tensor".into()));
    }
    let mut model = Model::new(header.config)?;
    model.load_params(tensors)?;
    Ok(Checkpoint { model, meta: header.meta })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, meta: &CheckpointMeta) -> Result<(), TtsError> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, meta)?;
    fs::write(path, bytes).map_err(|source| TtsError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TtsError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TtsError::Io { path: path.to_path_buf(), source })?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks that its architecture matches `requested`
/// (every field except the initialization seed).
pub fn load_checkpoint_for(path: impl AsRef<Path>, requested: &ModelConfig) -> Result<Checkpoint, TtsError> {
    let ckpt = load_checkpoint(path)?;
    let found = serde_json::to_value(ckpt.model.config())?;
    let want = serde_json::to_value(requested)?;
    let (Some(found), Some(want)) = (found.as_object(), want.as_object()) else {
        return Err(TtsError::Malformed("config is not a JSON object".into()));
    };
    let mismatched: Vec<String> = want
        .iter()
        .filter(|(k, v)| k.as_str() != "seed" && found.get(k.as_str()) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint {}, requested {v}", found.get(k.as_str()).map_or("missing".into(), |f| f.to_string())))
        .collect();
    if mismatched.is_empty() {
        Ok(ckpt)
    } else {
        Err(TtsError::ConfigMismatch(mismatched.join("; ")))
    }
}
