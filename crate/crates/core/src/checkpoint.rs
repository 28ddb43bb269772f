//! Binary checkpoint format.
//!
//! Layout (little-endian): the 8-byte magic `TAXCKPT1`, a `u64` header
//! length, the UTF-8 JSON header, then the raw `f32` payload. The header
//! lists every tensor with its shape and payload offset (in bytes from the
//! start of the payload).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tax_autodiff::Tensor;

use crate::error::{Result, TaxError};

pub const MAGIC: &[u8; 8] = b"TAXCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

/// Serializable ChaCha8 position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || TaxError::Invalid(format!("malformed RNG state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    stage: String,
    config: Value,
    state: Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: a named tensor table plus free-form JSON for the
/// configuration echo and training state (progress, RNG).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub config: Value,
    pub state: Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, config: Value, state: Value) -> Self {
        Checkpoint { stage: stage.into(), config, state, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.tensors.push((name.into(), shape.to_vec(), data));
    }

    pub fn push_tensors(&mut self, named: &[(String, Tensor)]) {
        for (n, t) in named {
            self.push(n.clone(), t.shape(), t.to_vec());
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Copies stored values into `named`, requiring every name and shape to match.
    pub fn restore_into(&self, named: &[(String, Tensor)]) -> Result<()> {
        for (n, t) in named {
            let (shape, data) = self.get(n).ok_or_else(|| TaxError::Invalid(format!("checkpoint of stage '{}' has no tensor '{n}'", self.stage)))?;
            if shape != t.shape() {
                return Err(TaxError::shape(format!("tensor '{n}'"), format!("{:?}", t.shape()), format!("{shape:?}")));
            }
            t.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, shape, data) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset, len: data.len() as u64 });
            offset += 4 * data.len() as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            stage: self.stage.clone(),
            config: self.config.clone(),
            state: self.state.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let err = |offset: u64, msg: String| TaxError::Checkpoint { path: path.to_path_buf(), offset, msg };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(err(0, "bad magic, expected TAXCKPT1".into()));
        }
        let len_bytes: [u8; 8] = bytes.get(8..16).and_then(|s| s.try_into().ok()).ok_or_else(|| err(8, "truncated header length".into()))?;
        let hlen = u64::from_le_bytes(len_bytes);
        let hend = 16u64.checked_add(hlen).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| err(8, format!("header length {hlen} exceeds file size")))?;
        let json = &bytes[16..hend as usize];
        let header: Header = serde_json::from_slice(json).map_err(|e| {
            // Translate serde's line/column into an absolute byte offset.
            let line_start: usize = json.split(|&b| b == b'\n').take(e.line().saturating_sub(1)).map(|l| l.len() + 1).sum();
            err(16 + (line_start + e.column().saturating_sub(1)) as u64, format!("malformed header JSON: {e}"))
        })?;
        if header.format_version != FORMAT_VERSION {
            return Err(TaxError::CheckpointVersion { path: path.to_path_buf(), found: header.format_version, expected: FORMAT_VERSION });
        }
        let payload = &bytes[hend as usize..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.shape.iter().product::<usize>() as u64 != e.len {
                return Err(err(hend + e.offset, format!("tensor '{}' shape {:?} does not match length {}", e.name, e.shape, e.len)));
            }
            let start = e.offset as usize;
            let end = e.len.checked_mul(4).and_then(|n| n.checked_add(e.offset)).unwrap_or(u64::MAX);
            let raw = payload.get(start..end.min(usize::MAX as u64) as usize).ok_or_else(|| err(hend + e.offset, format!("payload of tensor '{}' is truncated", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((e.name.clone(), e.shape.clone(), data));
        }
        Ok(Checkpoint { stage: header.stage, config: header.config, state: header.state, tensors })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| TaxError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| TaxError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| TaxError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
