//! Model checkpoint file.
//!
//! ```text
//! "PNMD" | version: u16 | header_len: u32 | ModelHeader JSON (EncoderConfig echo + run info)
//! blob_count: u32
//! per blob: name_len: u16 | name (UTF-8) | ndim: u8 | dims: u32 × ndim | f64 LE × Π dims
//! ```
//!
//! Adapter blobs are `block{i}.{q|k|v}.A`, `.B`, `.r` and `.alpha`; the
//! classifier head is `head.weight` / `head.bias`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BlockWeights, ClassifierHead, EncoderConfig, FrozenWeights, LayerNorm, PriorNetModel};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, QkvAdapters};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNMD";
const CHECKPOINT_VERSION: u16 = 1;

/// JSON header stored ahead of the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub encoder: EncoderConfig,
    /// Whether the model was trained on zero-placeholder clips (otherwise on repeated frames).
    pub placeholders: bool,
    pub frozen_checksum: String,
}

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        message: message.into(),
    }
}

fn push_blob(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &PriorNetModel, placeholders: bool) -> Result<Vec<u8>> {
    let header = ModelHeader {
        encoder: model.config.clone(),
        placeholders,
        frozen_checksum: model.frozen_checksum(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);

    let mut blobs: Vec<(String, Vec<usize>, &[f64])> = model
        .frozen
        .named_arrays()
        .into_iter()
        .map(|(n, d, s)| (n, s, d))
        .collect();
    let scalars: Vec<(String, [f64; 1])> = model
        .adapters
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.as_ref().map(|q| (i, q)))
        .flat_map(|(i, qkv)| {
            qkv.iter()
                .flat_map(move |(p, ad)| {
                    [(format!("block{i}.{p}.r"), [ad.rank as f64]), (format!("block{i}.{p}.alpha"), [ad.alpha])]
                })
                .collect::<Vec<_>>()
        })
        .collect();
    for (i, slot) in model.adapters.iter().enumerate() {
        if let Some(qkv) = slot {
            for (p, ad) in qkv.iter() {
                blobs.push((format!("block{i}.{p}.A"), ad.a.shape().to_vec(), ad.a.data()));
                blobs.push((format!("block{i}.{p}.B"), ad.b.shape().to_vec(), ad.b.data()));
            }
        }
    }
    for (name, v) in &scalars {
        blobs.push((name.clone(), vec![1], v));
    }
    blobs.push(("head.weight".into(), model.head.weight.shape().to_vec(), model.head.weight.data()));
    blobs.push(("head.bias".into(), vec![model.head.bias.len()], &model.head.bias));

    buf.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, dims, data) in blobs {
        push_blob(&mut buf, &name, &dims, data);
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format_err("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Blobs(BTreeMap<String, (Vec<usize>, Vec<f64>)>);

impl Blobs {
    fn tensor(&mut self, name: &str) -> Result<Tensor> {
        let (dims, data) = self.0.remove(name).ok_or_else(|| format_err(format!("missing blob {name}")))?;
        Tensor::new(dims, data).map_err(|e| format_err(format!("{name}: {e}")))
    }

    fn vector(&mut self, name: &str) -> Result<Vec<f64>> {
        Ok(self.tensor(name)?.into_data())
    }

    fn norm(&mut self, prefix: &str) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.vector(&format!("{prefix}.gamma"))?,
            beta: self.vector(&format!("{prefix}.beta"))?,
        })
    }

    fn adapter(&mut self, prefix: &str) -> Result<LoraAdapter> {
        let rank = self.vector(&format!("{prefix}.r"))?[0] as usize;
        let alpha = self.vector(&format!("{prefix}.alpha"))?[0];
        let a = self.tensor(&format!("{prefix}.A"))?;
        let b = self.tensor(&format!("{prefix}.B"))?;
        if a.shape().get(1) != Some(&rank) || b.shape().first() != Some(&rank) {
            return Err(format_err(format!("{prefix}: factor shapes disagree with rank {rank}")));
        }
        Ok(LoraAdapter { a, b, rank, alpha })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(PriorNetModel, ModelHeader)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(format_err("missing PNMD magic"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: ModelHeader = serde_json::from_slice(r.take(header_len)?)?;
    header.encoder.validate()?;

    let count = r.u32()?;
    let mut blobs = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| format_err("blob name is not UTF-8"))?;
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blobs.insert(name, (dims, data));
    }
    let mut blobs = Blobs(blobs);

    let cfg = header.encoder.clone();
    let embed_w = blobs.tensor("embed.w")?;
    let embed_b = blobs.vector("embed.b")?;
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    let mut adapters = Vec::with_capacity(cfg.num_blocks);
    for i in 0..cfg.num_blocks {
        let p = format!("block{i}");
        blocks.push(BlockWeights {
            norm1: blobs.norm(&format!("{p}.norm1"))?,
            wq: blobs.tensor(&format!("{p}.wq"))?,
            wk: blobs.tensor(&format!("{p}.wk"))?,
            wv: blobs.tensor(&format!("{p}.wv"))?,
            wo: blobs.tensor(&format!("{p}.wo"))?,
            norm2: blobs.norm(&format!("{p}.norm2"))?,
            w1: blobs.tensor(&format!("{p}.mlp.w1"))?,
            b1: blobs.vector(&format!("{p}.mlp.b1"))?,
            w2: blobs.tensor(&format!("{p}.mlp.w2"))?,
            b2: blobs.vector(&format!("{p}.mlp.b2"))?,
            heads: cfg.heads,
        });
        adapters.push(if blobs.0.contains_key(&format!("{p}.q.A")) {
            Some(QkvAdapters {
                q: blobs.adapter(&format!("{p}.q"))?,
                k: blobs.adapter(&format!("{p}.k"))?,
                v: blobs.adapter(&format!("{p}.v"))?,
            })
        } else {
            None
        });
    }
    let frozen = FrozenWeights {
        embed_w,
        embed_b,
        blocks,
        final_norm: blobs.norm("final_norm")?,
    };
    let head = ClassifierHead {
        weight: blobs.tensor("head.weight")?,
        bias: blobs.vector("head.bias")?,
    };
    if let Some(extra) = blobs.0.keys().next() {
        return Err(format_err(format!("unexpected blob {extra}")));
    }
    let model = PriorNetModel::from_parts(cfg, frozen, adapters, head);
    if model.frozen_checksum() != header.frozen_checksum {
        return Err(format_err("frozen-weight checksum does not match the header"));
    }
    Ok((model, header))
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &PriorNetModel, placeholders: bool) -> Result<()> {
    fs::write(path, encode_checkpoint(model, placeholders)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(PriorNetModel, ModelHeader)> {
    decode_checkpoint(&fs::read(path)?)
}
