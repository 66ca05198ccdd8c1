//! Binary model files.
//!
//! Both formats start with a 4-byte magic, a little-endian `u32` length and
//! that many bytes of JSON metadata. `LTC1` follows with every parameter as
//! little-endian `f32` in manifest order. `LTQ1` follows with one section per
//! parameter: dense ones as `f32`, quantized ones as the `f32` codebook, then
//! (when pruned) a `u32` kept count and a keep bitmap of `⌈n/8⌉` bytes, then
//! the indices packed at `bits` bits each, least significant bit first.

use std::fs;
use std::path::Path;

use lsra_core::compress::{CompressedModel, CompressedParam, QuantizedLayer};
use lsra_core::model::{Model, ModelConfig};
use lsra_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LTC1";
pub const COMPRESSED_MAGIC: &[u8; 4] = b"LTQ1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SectionMeta {
    Dense {
        name: String,
        shape: Vec<usize>,
        offset: u64,
    },
    Quantized {
        name: String,
        shape: Vec<usize>,
        offset: u64,
        bits: u32,
        codebook_len: usize,
        stored: usize,
        masked: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CompressedMeta {
    config: ModelConfig,
    sections: Vec<SectionMeta>,
}

fn frame(magic: &[u8; 4], meta: &impl Serialize, data: Vec<u8>) -> Vec<u8> {
    let meta = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(8 + meta.len() + data.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&data);
    out
}

fn unframe<'a, M: for<'de> Deserialize<'de>>(path: &Path, magic: &[u8; 4], bytes: &'a [u8]) -> Result<(M, &'a [u8])> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(CliError::format(path, format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let meta = bytes
        .get(8..8 + len)
        .ok_or_else(|| CliError::format(path, "metadata block truncated"))?;
    let meta = serde_json::from_slice(meta).map_err(|e| CliError::format(path, format!("metadata: {e}")))?;
    Ok((meta, &bytes[8 + len..]))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn push_f32(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    path: &'a Path,
    data: &'a [u8],
}

impl Cursor<'_> {
    fn take(&self, offset: u64, len: usize) -> Result<&[u8]> {
        let start = offset as usize;
        self.data
            .get(start..start + len)
            .ok_or_else(|| CliError::format(self.path, "data section truncated"))
    }

    fn f32s(&self, offset: u64, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(offset, 4 * n)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Serialize `model` with every value narrowed to 32 bits.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for p in model.params().iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: data.len() as u64,
        });
        push_f32(&mut data, p.tensor.data().iter().map(|&x| x as f32));
    }
    let meta = CheckpointMeta {
        config: model.config().clone(),
        tensors,
    };
    frame(CHECKPOINT_MAGIC, &meta, data)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Model> {
    let (meta, data): (CheckpointMeta, _) = unframe(path, CHECKPOINT_MAGIC, bytes)?;
    let cur = Cursor { path, data };
    let mut store = ParamStore::new();
    for t in &meta.tensors {
        let n = t.shape.iter().product();
        let values = cur.f32s(t.offset, n)?;
        let tensor = Tensor::new(&t.shape, values).map_err(|e| CliError::format(path, e.to_string()))?;
        store.add(t.name.clone(), tensor);
    }
    Model::from_params(&meta.config, &store).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(path, &read(path)?)
}

fn pack_indices(out: &mut Vec<u8>, indices: &[u32], bits: u32) {
    let start = out.len();
    out.resize(start + (indices.len() * bits as usize).div_ceil(8), 0);
    let buf = &mut out[start..];
    let mut bit = 0usize;
    for &ix in indices {
        for b in 0..bits {
            if ix >> b & 1 == 1 {
                buf[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
    }
}

fn unpack_indices(buf: &[u8], n: usize, bits: u32) -> Vec<u32> {
    let mut bit = 0usize;
    (0..n)
        .map(|_| {
            let mut v = 0u32;
            for b in 0..bits {
                if buf[bit / 8] >> (bit % 8) & 1 == 1 {
                    v |= 1 << b;
                }
                bit += 1;
            }
            v
        })
        .collect()
}

pub fn encode_compressed(model: &CompressedModel) -> Vec<u8> {
    let mut data = Vec::new();
    let mut sections = Vec::new();
    for p in &model.params {
        let offset = data.len() as u64;
        match p {
            CompressedParam::Dense { name, tensor } => {
                sections.push(SectionMeta::Dense {
                    name: name.clone(),
                    shape: tensor.shape().to_vec(),
                    offset,
                });
                push_f32(&mut data, tensor.data().iter().map(|&x| x as f32));
            }
            CompressedParam::Quantized(q) => {
                sections.push(SectionMeta::Quantized {
                    name: q.name.clone(),
                    shape: q.shape.clone(),
                    offset,
                    bits: q.bits,
                    codebook_len: q.codebook.len(),
                    stored: q.indices.len(),
                    masked: q.mask.is_some(),
                });
                push_f32(&mut data, q.codebook.iter().copied());
                if let Some(mask) = &q.mask {
                    data.extend_from_slice(&(q.indices.len() as u32).to_le_bytes());
                    let start = data.len();
                    data.resize(start + mask.len().div_ceil(8), 0);
                    for (i, &keep) in mask.iter().enumerate() {
                        if keep {
                            data[start + i / 8] |= 1 << (i % 8);
                        }
                    }
                }
                pack_indices(&mut data, &q.indices, q.bits);
            }
        }
    }
    let meta = CompressedMeta {
        config: model.config.clone(),
        sections,
    };
    frame(COMPRESSED_MAGIC, &meta, data)
}

pub fn decode_compressed(path: &Path, bytes: &[u8]) -> Result<CompressedModel> {
    let (meta, data): (CompressedMeta, _) = unframe(path, COMPRESSED_MAGIC, bytes)?;
    let cur = Cursor { path, data };
    let mut params = Vec::with_capacity(meta.sections.len());
    for s in meta.sections {
        match s {
            SectionMeta::Dense { name, shape, offset } => {
                let values = cur.f32s(offset, shape.iter().product())?;
                let tensor = Tensor::new(&shape, values).map_err(|e| CliError::format(path, e.to_string()))?;
                params.push(CompressedParam::Dense { name, tensor });
            }
            SectionMeta::Quantized {
                name,
                shape,
                offset,
                bits,
                codebook_len,
                stored,
                masked,
            } => {
                let n: usize = shape.iter().product();
                let codebook: Vec<f32> = cur.f32s(offset, codebook_len)?.into_iter().map(|x| x as f32).collect();
                let mut at = offset + 4 * codebook_len as u64;
                let mask = if masked {
                    let count = u32::from_le_bytes(cur.take(at, 4)?.try_into().unwrap()) as usize;
                    let bitmap = cur.take(at + 4, n.div_ceil(8))?;
                    let mask: Vec<bool> = (0..n).map(|i| bitmap[i / 8] >> (i % 8) & 1 == 1).collect();
                    if count != stored || mask.iter().filter(|k| **k).count() != count {
                        return Err(CliError::format(path, format!("`{name}`: kept count disagrees with bitmap")));
                    }
                    at += 4 + n.div_ceil(8) as u64;
                    Some(mask)
                } else {
                    None
                };
                let packed = cur.take(at, (stored * bits as usize).div_ceil(8))?;
                let indices = unpack_indices(packed, stored, bits);
                if indices.iter().any(|&i| i as usize >= codebook_len) {
                    return Err(CliError::format(path, format!("`{name}`: index outside the codebook")));
                }
                params.push(CompressedParam::Quantized(QuantizedLayer {
                    name,
                    shape,
                    bits,
                    codebook,
                    indices,
                    mask,
                }));
            }
        }
    }
    Ok(CompressedModel {
        config: meta.config,
        params,
    })
}

pub fn save_compressed(path: &Path, model: &CompressedModel) -> Result<()> {
    write(path, &encode_compressed(model))
}

pub fn load_compressed(path: &Path) -> Result<CompressedModel> {
    decode_compressed(path, &read(path)?)
}
