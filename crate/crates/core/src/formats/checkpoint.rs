use std::path::Path;

use super::{read_u32, write_atomic};
use crate::backbone::{AttentionMode, BackboneConfig, EditModel, ModelConfig};
use crate::datagen::SignalKind;
use crate::numerics::{ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named `f32` tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// `FPCK`, u32 version, then per tensor: u32 name length, UTF-8 name,
    /// u32 ndim, u32 dims, f32 payload; all little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], context: &str) -> Result<Self> {
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(Error::format(context, "missing FPCK magic"));
        }
        let mut at = 4;
        let version = read_u32(bytes, &mut at, context)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(context, format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let mut tensors = Vec::new();
        while at < bytes.len() {
            let len = read_u32(bytes, &mut at, context)? as usize;
            let name = bytes
                .get(at..at + len)
                .ok_or_else(|| Error::format(context, "truncated tensor name"))
                .and_then(|b| std::str::from_utf8(b).map_err(|_| Error::format(context, "tensor name is not UTF-8")))?
                .to_owned();
            at += len;
            let ndim = read_u32(bytes, &mut at, context)? as usize;
            let shape = (0..ndim).map(|_| read_u32(bytes, &mut at, context).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = bytes.get(at..at + 4 * n).ok_or_else(|| Error::format(context, format!("truncated payload of {name}")))?;
            at += 4 * n;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(context, format!("{name}: {e}")))?;
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(Error::format(context, format!("duplicate tensor {name}")));
            }
            tensors.push((name, t));
        }
        Ok(Self { tensors })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?, &path.display().to_string())
}

const META_CONFIG: &str = "meta.config";
const META_MULTIPLIERS: &str = "meta.multipliers";
const META_LEVELS: &str = "meta.attention_levels";

fn ints(values: &[usize]) -> Tensor<f32> {
    Tensor::new(vec![values.len()], values.iter().map(|&v| v as f32).collect()).expect("non-empty")
}

/// Model parameters plus `meta.*` tensors describing the architecture and
/// signal type, so a checkpoint is self-describing.
pub fn model_checkpoint(config: &ModelConfig, store: &ParamStore<f32>) -> Checkpoint {
    let b = &config.backbone;
    let mut tensors = vec![
        (
            META_CONFIG.to_owned(),
            ints(&[
                b.image_height,
                b.image_width,
                b.patch,
                b.base_channels,
                b.heads,
                b.embed_dim,
                b.norm_groups,
                b.attention_mode.code() as usize,
                config.signal.code() as usize,
                config.control_width,
            ]),
        ),
        (META_MULTIPLIERS.to_owned(), ints(&b.multipliers)),
        (META_LEVELS.to_owned(), ints(&std::iter::once(b.attention_levels.len()).chain(b.attention_levels.iter().copied()).collect::<Vec<_>>())),
    ];
    tensors.extend(store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())));
    Checkpoint { tensors }
}

pub fn save_model(path: &Path, config: &ModelConfig, store: &ParamStore<f32>) -> Result<()> {
    save_checkpoint(path, &model_checkpoint(config, store))
}

fn model_config(ckpt: &Checkpoint, context: &str) -> Result<ModelConfig> {
    let get = |name: &str| -> Result<Vec<usize>> {
        let t = ckpt.get(name).ok_or_else(|| Error::format(context, format!("missing {name}")))?;
        Ok(t.data().iter().map(|&v| v as usize).collect())
    };
    let c = get(META_CONFIG)?;
    if c.len() != 10 {
        return Err(Error::format(context, format!("{META_CONFIG} has {} entries", c.len())));
    }
    let levels = get(META_LEVELS)?;
    if levels.is_empty() || levels.len() != levels[0] + 1 {
        return Err(Error::format(context, format!("malformed {META_LEVELS}")));
    }
    let mode = AttentionMode::from_code(c[7] as u8).ok_or_else(|| Error::format(context, format!("unknown attention mode code {}", c[7])))?;
    let signal = SignalKind::from_code(c[8] as u8).ok_or_else(|| Error::format(context, format!("unknown signal code {}", c[8])))?;
    Ok(ModelConfig {
        backbone: BackboneConfig {
            image_height: c[0],
            image_width: c[1],
            patch: c[2],
            base_channels: c[3],
            heads: c[4],
            embed_dim: c[5],
            norm_groups: c[6],
            attention_mode: mode,
            multipliers: get(META_MULTIPLIERS)?,
            attention_levels: levels[1..].to_vec(),
        },
        signal,
        control_width: c[9],
    })
}

/// Rebuilds the model described by the checkpoint and loads every
/// parameter; names and shapes must match exactly.
pub fn model_from_checkpoint(ckpt: &Checkpoint, context: &str) -> Result<(EditModel, ParamStore<f32>)> {
    let config = model_config(ckpt, context)?;
    let (model, mut store) = EditModel::init(&config, 0)?;
    let mut loaded = 0;
    for (name, t) in ckpt.tensors.iter().filter(|(n, _)| !n.starts_with("meta.")) {
        store.set_value(name, t.clone()).map_err(|e| Error::format(context, format!("{name}: {e}")))?;
        loaded += 1;
    }
    if loaded != store.len() {
        return Err(Error::format(context, format!("{loaded} parameters for a model with {}", store.len())));
    }
    Ok((model, store))
}

pub fn load_model(path: &Path) -> Result<(EditModel, ParamStore<f32>)> {
    let ctx = path.display().to_string();
    model_from_checkpoint(&load_checkpoint(path)?, &ctx)
}
