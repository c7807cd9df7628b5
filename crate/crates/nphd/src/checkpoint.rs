//! Adapter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NPHD1"
//! u32 header length, then that many bytes of JSON (CheckpointHeader)
//! u32 array count
//! per array: u32 name length, UTF-8 name, u32 rank, u32 per dimension,
//!            then the values as IEEE-754 f32
//! ```
//!
//! Only trainable tensors are stored. The frozen base is rebuilt from the
//! model config (and quantization settings) and must hash to `base_hash`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use nphd_core::lora::LoraConfig;
use nphd_core::model::{ModelConfig, ModelError, Seq2SeqModel};
use nphd_core::numerics::Tensor;
use nphd_core::quant::QuantScheme;
use nphd_core::tokenizer::SubwordTokenizer;

pub const MAGIC: &[u8; 5] = b"NPHD1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    Magic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint has {0} unexpected trailing bytes")]
    Trailing(usize),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("bad array {0}")]
    Array(String),
    #[error("base weights do not match the checkpoint (hash {found}, expected {expected})")]
    BaseMismatch { expected: String, found: String },
    #[error("adapter layout does not match the checkpoint")]
    ShapeMismatch,
    #[error("tokenizer does not match the checkpoint")]
    TokenizerMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub scheme: QuantScheme,
    pub block_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub quant: Option<QuantSpec>,
    pub tokenizer_hash: String,
    pub base_hash: String,
    pub shape_signature: String,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

/// Builds the frozen base described by `config` and `quant`.
pub fn build_base(config: &ModelConfig, quant: Option<QuantSpec>) -> Result<Seq2SeqModel<f32>> {
    let mut m = Seq2SeqModel::new(config.clone())?;
    if let Some(q) = quant {
        m.quantize_base(q.scheme, q.block_size)?;
    }
    Ok(m)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn from_model(
        model: &Seq2SeqModel<f32>,
        quant: Option<QuantSpec>,
        tokenizer: &SubwordTokenizer,
        epoch: usize,
    ) -> Result<Self> {
        let lora = model
            .lora_config()
            .cloned()
            .ok_or_else(|| CheckpointError::Header("model has no adapters".into()))?;
        Ok(Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model: model.config().clone(),
                lora,
                quant,
                tokenizer_hash: hex::encode(tokenizer.hash()),
                base_hash: hex::encode(model.base_hash()),
                shape_signature: hex::encode(model.shape_signature()),
                epoch,
            },
            arrays: model.trainable_params(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend(t.to_le_f32_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(MAGIC.len(), "magic").map_err(|_| CheckpointError::Magic)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let hlen = r.u32("header length")? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Header(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let count = r.u32("array count")?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32("array name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "array name")?)
                .map_err(|_| CheckpointError::Array("name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("array rank")? as usize;
            if rank > 4 {
                return Err(CheckpointError::Array(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("array shape")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes_len = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Array(format!("{name}: shape overflows")))?;
            let data: Vec<f32> = r
                .take(bytes_len, "array data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Array(format!("{name}: {e}")))?;
            if arrays.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Array(format!("{name}: duplicated")));
            }
        }
        if !r.buf.is_empty() {
            return Err(CheckpointError::Trailing(r.buf.len()));
        }
        Ok(Self { header, arrays })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn check_tokenizer(&self, tokenizer: &SubwordTokenizer) -> Result<()> {
        if hex::encode(tokenizer.hash()) != self.header.tokenizer_hash {
            return Err(CheckpointError::TokenizerMismatch);
        }
        Ok(())
    }

    /// Rebuilds the base, verifies its hash, attaches adapters and loads the
    /// stored tensors.
    pub fn restore(&self) -> Result<Seq2SeqModel<f32>> {
        let h = &self.header;
        let mut model = build_base(&h.model, h.quant)?;
        let found = hex::encode(model.base_hash());
        if found != h.base_hash {
            return Err(CheckpointError::BaseMismatch {
                expected: h.base_hash.clone(),
                found,
            });
        }
        model.attach_lora(&h.lora, 0)?;
        if hex::encode(model.shape_signature()) != h.shape_signature {
            return Err(CheckpointError::ShapeMismatch);
        }
        let expected = model.trainable_params();
        if expected.len() != self.arrays.len() {
            return Err(CheckpointError::ShapeMismatch);
        }
        for (name, t) in &self.arrays {
            match expected.get(name) {
                Some(e) if e.shape() == t.shape() => model.set_trainable(name, t.clone())?,
                _ => return Err(CheckpointError::ShapeMismatch),
            }
        }
        Ok(model)
    }
}
