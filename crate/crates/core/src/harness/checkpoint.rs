//! Versioned little-endian checkpoint files.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON
//! header (run config, model config, vocabulary, normalizer, class names
//! and a table of named parameter shapes with offsets), then every
//! parameter as raw `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::write_atomic;
use super::RunConfig;
use crate::data::Normalizer;
use crate::eapcr::FeatureVocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TEAPCRT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

/// A trained model with everything needed to score new data.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub model: Model,
    pub normalizer: Normalizer,
    pub classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// In `f64` elements from the start of the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    run: RunConfig,
    model: ModelConfig,
    vocab: FeatureVocab,
    normalizer: Normalizer,
    classes: Vec<String>,
    seed: u64,
    params: Vec<ParamEntry>,
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut params = Vec::new();
    let mut offset = 0;
    for (name, t) in ck.model.store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header {
        run: ck.run.clone(),
        model: ck.model.config.clone(),
        vocab: ck.model.vocab.clone(),
        normalizer: ck.normalizer.clone(),
        classes: ck.classes.clone(),
        seed: ck.model.config.seed,
        params,
    })?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + 8 * offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in ck.model.store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_bytes(ck)?)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < PREAMBLE {
        return Err(corrupt("file is truncated"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| PREAMBLE.checked_add(n))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("file is truncated inside the header"))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    let payload = &bytes[header_end..];
    if payload.len() % 8 != 0 {
        return Err(corrupt("payload is not a whole number of f64 values"));
    }
    let mut expected = 0;
    let mut named = Vec::with_capacity(header.params.len());
    for p in &header.params {
        if p.offset != expected {
            return Err(Error::Checkpoint(format!("parameter {} has offset {}, expected {expected}", p.name, p.offset)));
        }
        let len: usize = p.shape.iter().product();
        expected += len;
        if expected * 8 > payload.len() {
            return Err(corrupt("file is truncated inside the parameters"));
        }
        let data = payload[p.offset * 8..expected * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        named.push((p.name.clone(), Tensor::new(p.shape.clone(), data)?));
    }
    if expected * 8 != payload.len() {
        return Err(corrupt("payload length disagrees with the shape table"));
    }
    let mut model = Model::new(header.model, header.vocab)?;
    model
        .store
        .load_from(&named)
        .map_err(|e| Error::Checkpoint(format!("shape table does not match the architecture: {e}")))?;
    Ok(Checkpoint {
        run: header.run,
        model,
        normalizer: header.normalizer,
        classes: header.classes,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    parse_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
