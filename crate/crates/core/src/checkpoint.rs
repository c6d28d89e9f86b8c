//! The `WCL1` checkpoint format.
//!
//! ```text
//! "WCL1"                     4 bytes
//! header_len                 u64, little endian
//! header                     UTF-8 JSON, header_len bytes
//! payload                    tensors in header order, row-major f32 LE
//! ```
//!
//! The header carries the model config (or `null` for a bare probe head),
//! free-form mode tags, the tensor table and a CRC-32 of the payload.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ProbeHead;
use crate::lora::LoraPair;
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTModel};

pub const MAGIC: &[u8; 4] = b"WCL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: Option<ViTConfig>,
    pub mode_tags: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub payload_crc32: u32,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Option<ViTConfig>,
    pub mode_tags: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &ViTModel, mode_tags: &[&str]) -> Self {
        Checkpoint {
            config: Some(model.config.clone()),
            mode_tags: mode_tags.iter().map(|s| s.to_string()).collect(),
            tensors: model.named_tensors(),
        }
    }

    pub fn from_probe(head: &ProbeHead) -> Self {
        Checkpoint {
            config: None,
            mode_tags: vec!["probe_head".into()],
            tensors: vec![
                ("head.w".into(), head.weight.clone()),
                ("head.b".into(), head.bias.clone()),
            ],
        }
    }

    fn payload(&self) -> Vec<u8> {
        let n: usize = self.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(n);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            mode_tags: self.mode_tags.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            payload_crc32: crc32fast::hash(&payload),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing WCL1 magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| h.checked_add(12))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::Corruption(format!(
                    "header of {header_len} bytes exceeds file of {} bytes",
                    bytes.len()
                ))
            })?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let payload = &bytes[header_end..];
        let expected: usize = header
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * 4)
            .sum();
        if payload.len() != expected {
            return Err(Error::Corruption(format!(
                "payload holds {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        let crc = crc32fast::hash(payload);
        if crc != header.payload_crc32 {
            return Err(Error::Corruption(format!(
                "payload checksum {crc:08x} does not match header {:08x}",
                header.payload_crc32
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[offset..offset + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += n * 4;
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Checkpoint {
            config: header.config,
            mode_tags: header.mode_tags,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Rebuilds a model, including unmerged adapters stored as
    /// `….lora_a` / `….lora_b`.
    pub fn to_model(&self) -> Result<ViTModel> {
        let config = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Format("checkpoint has no model config".into()))?;
        let mut model = ViTModel::zeros(config)?;
        let mut by_name: HashMap<&str, &Tensor> = HashMap::new();
        for (name, t) in &self.tensors {
            if by_name.insert(name.as_str(), t).is_some() {
                return Err(Error::Format(format!("tensor {name} appears twice")));
            }
        }
        for (name, a) in &self.tensors {
            let Some(layer_path) = name.strip_suffix(".lora_a") else { continue };
            let b = by_name
                .get(format!("{layer_path}.lora_b").as_str())
                .ok_or_else(|| Error::Format(format!("{name} has no matching lora_b")))?;
            let (block, layer) = parse_block_layer(layer_path)
                .ok_or_else(|| Error::Format(format!("unexpected adapter tensor {name}")))?;
            let lin = model
                .blocks
                .get_mut(block)
                .and_then(|blk| blk.linear_mut(layer))
                .ok_or_else(|| Error::Format(format!("adapter {name} does not match the config")))?;
            lin.adapter = Some(LoraPair {
                a: Tensor::zeros(a.shape().to_vec()),
                b: Tensor::zeros(b.shape().to_vec()),
            });
        }
        let mut missing = Vec::new();
        let mut assigned = 0;
        let mut mismatch = None;
        model.visit_mut(&mut |name, t| match by_name.get(name) {
            Some(src) if src.shape() == t.shape() => {
                t.data_mut().copy_from_slice(src.data());
                assigned += 1;
            }
            Some(src) => {
                mismatch.get_or_insert_with(|| Error::dim("checkpoint tensor", t.shape(), src.shape()));
            }
            None => missing.push(name.to_string()),
        });
        if let Some(e) = mismatch {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(Error::Format(format!("checkpoint lacks tensors: {}", missing.join(", "))));
        }
        if assigned != self.tensors.len() {
            let known: std::collections::HashSet<String> =
                model.named_tensors().into_iter().map(|(n, _)| n).collect();
            let extra: Vec<&str> = self
                .tensors
                .iter()
                .map(|(n, _)| n.as_str())
                .filter(|n| !known.contains(*n))
                .collect();
            return Err(Error::Format(format!("unexpected tensors: {}", extra.join(", "))));
        }
        Ok(model)
    }

    pub fn to_probe(&self) -> Result<ProbeHead> {
        let find = |n: &str| {
            self.tensors
                .iter()
                .find(|(name, _)| name == n)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("probe checkpoint lacks {n}")))
        };
        let weight = find("head.w")?;
        let bias = find("head.b")?;
        let (c, _) = weight.dims2()?;
        if bias.shape() != [c] {
            return Err(Error::dim("probe head", weight.shape(), bias.shape()));
        }
        Ok(ProbeHead { weight, bias })
    }
}

/// `block.{i}.attn.wq` → (0-based block, `attn.wq`).
fn parse_block_layer(path: &str) -> Option<(usize, &str)> {
    let rest = path.strip_prefix("block.")?;
    let (idx, layer) = rest.split_once('.')?;
    let i: usize = idx.parse().ok()?;
    Some((i.checked_sub(1)?, layer))
}

pub fn save_checkpoint(model: &ViTModel, mode_tags: &[&str], path: &Path) -> Result<()> {
    Checkpoint::from_model(model, mode_tags).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ViTModel> {
    Checkpoint::load(path)?.to_model()
}
