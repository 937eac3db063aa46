//! The two-frame denoiser: a lossless patchify latent, a small U-Net run on
//! both frames with shared weights, and attention sites where the frames
//! interact.

pub(crate) mod layers;
mod model;
mod unet;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use model::{EditModel, ModelConfig, ModelInputs, ModelOutput};
pub use unet::{DenoiseOutput, Denoiser, RecordVar};

use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};
use layers::{Conv, LayerNorm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Temporal,
    CrossFrame,
    Matching,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [AttentionMode::Temporal, AttentionMode::CrossFrame, AttentionMode::Matching];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Temporal => "temporal",
            AttentionMode::CrossFrame => "crossframe",
            AttentionMode::Matching => "matching",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            AttentionMode::Temporal => 0,
            AttentionMode::CrossFrame => 1,
            AttentionMode::Matching => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention mode {s:?} (expected temporal, crossframe or matching)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Image size in pixels.
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub base_channels: usize,
    pub multipliers: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub heads: usize,
    pub embed_dim: usize,
    pub attention_mode: AttentionMode,
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch: 4,
            base_channels: 32,
            multipliers: vec![1, 2, 4],
            attention_levels: vec![1, 2],
            heads: 4,
            embed_dim: 64,
            attention_mode: AttentionMode::Matching,
            norm_groups: 8,
        }
    }
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.multipliers.len()
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.multipliers[level]
    }

    /// Token grid `(height, width)` of a level.
    pub fn level_grid(&self, level: usize) -> (usize, usize) {
        ((self.image_height / self.patch) >> level, (self.image_width / self.patch) >> level)
    }

    /// Pixels per token side at a level.
    pub fn level_stride(&self, level: usize) -> usize {
        self.patch << level
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }

    pub fn attention_strides(&self) -> Vec<usize> {
        self.attention_levels.iter().map(|&l| self.level_stride(l)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.base_channels == 0 || self.multipliers.is_empty() || self.multipliers.contains(&0) {
            return bad("patch, base_channels and multipliers must be positive".into());
        }
        let coarsest = self.patch << (self.levels() - 1);
        if !self.image_height.is_multiple_of(coarsest) || !self.image_width.is_multiple_of(coarsest) {
            return bad(format!(
                "image {}x{} is not divisible by {coarsest} (patch {} over {} levels)",
                self.image_height,
                self.image_width,
                self.patch,
                self.levels()
            ));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return bad(format!("attention level {l} does not exist ({} levels)", self.levels()));
        }
        let mut sorted = self.attention_levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.attention_levels.len() {
            return bad("attention levels repeat".into());
        }
        for &l in &self.attention_levels {
            if self.heads == 0 || !self.level_channels(l).is_multiple_of(self.heads) {
                return bad(format!("{} heads do not divide {} channels at level {l}", self.heads, self.level_channels(l)));
            }
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return bad(format!("embed_dim {} must be even and at least 2", self.embed_dim));
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive".into());
        }
        for l in 0..self.levels() {
            let c = self.level_channels(l);
            if !c.is_multiple_of(self.norm_groups.min(c)) {
                return bad(format!("{} norm groups do not divide {c} channels at level {l}", self.norm_groups));
            }
        }
        Ok(())
    }
}

/// Space-to-depth: `[C, H, W] -> [C*f*f, H/f, W/f]`, output channel
/// `c*f*f + dy*f + dx` holding pixel `(y*f + dy, x*f + dx)` of channel `c`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || f == 0 || !s[1].is_multiple_of(f) || !s[2].is_multiple_of(f) {
        return Err(Error::Shape(format!("cannot patchify {s:?} by {f}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (hp, wp) = (h / f, w / f);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                for y in 0..hp {
                    for x in 0..wp {
                        out.push(src[(ch * h + y * f + dy) * w + x * f + dx]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![c * f * f, hp, wp], out)?)
}

pub fn unpatchify<T: Scalar>(latent: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let s = latent.shape();
    if s.len() != 3 || f == 0 || !s[0].is_multiple_of(f * f) {
        return Err(Error::Shape(format!("cannot unpatchify {s:?} by {f}")));
    }
    let (c, hp, wp) = (s[0] / (f * f), s[1], s[2]);
    let (h, w) = (hp * f, wp * f);
    let src = latent.data();
    let mut out = vec![T::zero(); src.len()];
    let mut i = 0;
    for ch in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                for y in 0..hp {
                    for x in 0..wp {
                        out[(ch * h + y * f + dy) * w + x * f + dx] = src[i];
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], out)?)
}

/// Image in `[0, 1]` to a zero-centred latent.
pub fn encode_image<T: Scalar>(image: &crate::image::Image, f: usize) -> Result<Tensor<T>> {
    let t: Tensor<T> = image.to_tensor();
    patchify(&t.map(|v| v * T::of(2.0) - T::one()), f)
}

/// Latent back to an image, clipped to `[0, 1]`.
pub fn decode_latent<T: Scalar>(latent: &Tensor<T>, f: usize) -> Result<crate::image::Image> {
    let t = unpatchify(latent, f)?;
    crate::image::Image::from_tensor(&t.map(|v| ((v + T::one()) * T::of(0.5)).max(T::zero()).min(T::one())))
}

/// Source and target latents of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair<T: Scalar = f32> {
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    pub patch: usize,
}

impl<T: Scalar> LatentPair<T> {
    pub fn new(source: Tensor<T>, target: Tensor<T>, patch: usize) -> Result<Self> {
        if source.shape() != target.shape() || source.ndim() != 3 {
            return Err(Error::Shape(format!("latent frames {:?} and {:?} differ", source.shape(), target.shape())));
        }
        Ok(Self { source, target, patch })
    }

    pub fn shape(&self) -> &[usize] {
        self.source.shape()
    }

    pub fn map_frames(&self, mut f: impl FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self { source: f(&self.source), target: f(&self.target), patch: self.patch }
    }
}

/// Tokens summarising the source image for cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding<T: Scalar = f32> {
    pub tokens: Tensor<T>,
}

/// Small conv encoder standing in for a pretrained image encoder: the
/// patchified source is reduced 4x and read out as `[n_emb, embed_dim]`.
pub struct ImageEmbedder {
    conv1: Conv,
    conv2: Conv,
    norm: LayerNorm,
    patch: usize,
}

impl ImageEmbedder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let hidden = config.base_channels;
        Ok(Self {
            conv1: Conv::new(store, "embed.conv1", config.latent_channels(), hidden, 3, 2, 1.0, rng)?,
            conv2: Conv::new(store, "embed.conv2", hidden, config.embed_dim, 3, 2, 1.0, rng)?,
            norm: LayerNorm::new(store, "embed.norm", config.embed_dim)?,
            patch: config.patch,
        })
    }

    /// Graph form taking the source latent; returns `[n_emb, embed_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, source_latent: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, source_latent)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let t = layers::to_tokens(g, h)?;
        self.norm.forward(g, store, t)
    }

    pub fn embed_source<T: Scalar>(&self, store: &ParamStore<T>, image: &crate::image::Image) -> Result<ImageEmbedding<T>> {
        let mut g = Graph::new();
        let z = g.input(encode_image(image, self.patch)?)?;
        let e = self.forward(&mut g, store, z)?;
        Ok(ImageEmbedding { tokens: g.value(e).clone() })
    }
}
