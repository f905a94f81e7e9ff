//! Binary checkpoints.
//!
//! Layout: the magic `QAPR`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then every tensor's
//! raw little-endian `f32` data at the offsets listed in the header
//! directory. Masks and gate parameters are stored as named tensors too, so
//! a round trip reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{ForcedUnit, GateFamily, GateMask, GatePair, HardConcreteGates, HardConcreteParams};
use crate::model::{LayerSizes, Model, TransformerConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QAPR";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

/// A model plus the optional mask and gates it was pruned with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub mask: Option<GateMask>,
    pub gates: Option<GatePair>,
}

impl Checkpoint {
    pub fn model(model: Model) -> Self {
        Self {
            model,
            mask: None,
            gates: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TransformerConfig,
    sizes: LayerSizes,
    frozen: bool,
    tensors: Vec<Entry>,
    #[serde(default)]
    mask_forced: Option<Vec<ForcedUnit>>,
    #[serde(default)]
    gate_params: Option<[HardConcreteParams; 2]>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: u64,
    /// Element count.
    len: u64,
}

fn layer_tensors(prefix: &str, v: &[Vec<f32>]) -> Vec<(String, Tensor)> {
    v.iter()
        .enumerate()
        .map(|(l, x)| (format!("{prefix}.{l}"), Tensor::vector(x.clone())))
        .collect()
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut named: Vec<(String, Tensor)> = ckpt
        .model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    if let Some(mask) = &ckpt.mask {
        named.extend(layer_tensors("mask.attn", &mask.attn));
        named.extend(layer_tensors("mask.ff", &mask.ff));
    }
    if let Some(g) = &ckpt.gates {
        named.extend(layer_tensors("gates.attn.log_alpha", &g.attn.log_alpha));
        named.extend(layer_tensors("gates.ff.log_alpha", &g.ff.log_alpha));
    }

    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in &named {
        tensors.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            len: t.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: ckpt.model.config.clone(),
        sizes: ckpt.model.sizes(),
        frozen: ckpt.model.is_frozen(),
        tensors,
        mask_forced: ckpt.mask.as_ref().map(|m| m.forced.clone()),
        gate_params: ckpt.gates.as_ref().map(|g| [g.attn.params, g.ff.params]),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX_LEN {
        return Err(Error::checkpoint("header", "file is shorter than the fixed prefix"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::checkpoint("magic", "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            "version",
            format!("format version {version} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::checkpoint("header", "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
        .map_err(|e| Error::checkpoint("header", e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut expected_offset = 0u64;
    let mut tensors = std::collections::HashMap::new();
    for e in &header.tensors {
        let field = format!("directory.{}", e.name);
        let n: usize = e.shape.iter().product();
        if n as u64 != e.len {
            return Err(Error::checkpoint(field, format!("shape {:?} does not hold {} values", e.shape, e.len)));
        }
        if e.offset != expected_offset {
            return Err(Error::checkpoint(field, format!("offset {} should be {expected_offset}", e.offset)));
        }
        let end = e.offset + 4 * e.len;
        if end > payload.len() as u64 {
            return Err(Error::checkpoint(field, "payload is truncated"));
        }
        let data = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::checkpoint(&e.name, err.to_string()))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::checkpoint(field, "duplicate tensor name"));
        }
        expected_offset = end;
    }
    if expected_offset != payload.len() as u64 {
        return Err(Error::checkpoint("payload", "trailing bytes after the last tensor"));
    }

    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::checkpoint(format!("directory.{name}"), "missing tensor"))
    };
    let n_layers = header.config.n_layers;
    let weights = Model::tensor_names(n_layers)
        .iter()
        .map(|n| take(n))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::from_tensors(header.config.clone(), weights)
        .map_err(|e| Error::checkpoint("tensors", e.to_string()))?;
    if model.sizes() != header.sizes {
        return Err(Error::checkpoint(
            "sizes",
            format!("header sizes {:?} disagree with tensor shapes {:?}", header.sizes, model.sizes()),
        ));
    }
    if header.frozen {
        model.freeze();
    }

    let mut layers = |prefix: &str| -> Result<Vec<Vec<f32>>> {
        (0..n_layers).map(|l| take(&format!("{prefix}.{l}")).map(Tensor::into_data)).collect()
    };
    let mask = match header.mask_forced {
        Some(forced) => Some(GateMask {
            attn: layers("mask.attn")?,
            ff: layers("mask.ff")?,
            forced,
        }),
        None => None,
    };
    let gates = match header.gate_params {
        Some([pa, pf]) => Some(GatePair {
            attn: HardConcreteGates {
                family: GateFamily::Attention,
                log_alpha: layers("gates.attn.log_alpha")?,
                params: pa,
            },
            ff: HardConcreteGates {
                family: GateFamily::FeedForward,
                log_alpha: layers("gates.ff.log_alpha")?,
                params: pf,
            },
            history: Vec::new(),
        }),
        None => None,
    };
    if let Some(name) = tensors.keys().min() {
        return Err(Error::checkpoint(format!("directory.{name}"), "unexpected tensor"));
    }
    Ok(Checkpoint { model, mask, gates })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, to_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
