//! Editing-signal injection into the target frame: a residual encoder for
//! raster signals (sketches, coarse edits) and token copying for drags.

mod drag;

use rand::Rng;

pub use drag::{DragPair, DragPointSet};

use crate::backbone::layers::{Conv, GroupNorm};
use crate::backbone::{patchify, BackboneConfig};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::{Error, Result};

/// Control features for one backbone level with the scale they are
/// injected at.
#[derive(Clone, Copy, Debug)]
pub struct LevelControl {
    pub level: usize,
    pub features: Var,
    pub scale: Var,
}

struct ControlBlock {
    norm1: GroupNorm,
    conv1: Conv,
    norm2: GroupNorm,
    conv2: Conv,
}

impl ControlBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c, 8)?,
            conv1: Conv::new(store, &format!("{name}.conv1"), c, c, 3, 1, 1.0, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c, 8)?,
            conv2: Conv::new(store, &format!("{name}.conv2"), c, c, 3, 1, 0.5, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = g.silu(h)?;
        let h = self.conv1.forward(g, store, h)?;
        let h = self.norm2.forward(g, store, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        Ok(g.add(x, h)?)
    }
}

struct ControlStage {
    level: usize,
    down: Option<Conv>,
    block: ControlBlock,
    output: Option<(Conv, ParamId)>,
}

/// Patchified raster -> conv stem -> one residual block per backbone level
/// (downsampling between levels) -> 1x1 projections at attention levels.
pub struct ControlEncoder {
    stem: Conv,
    stages: Vec<ControlStage>,
    raster_channels: usize,
    height: usize,
    width: usize,
    patch: usize,
}

impl ControlEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &BackboneConfig, raster_channels: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if raster_channels == 0 || width == 0 {
            return Err(Error::Config("control encoder needs positive raster channels and width".into()));
        }
        let f = config.patch;
        let stem = Conv::new(store, "control.stem", raster_channels * f * f, width, 3, 1, 1.0, rng)?;
        let last = config.attention_levels.iter().copied().max().unwrap_or(0);
        let mut stages = Vec::new();
        for level in 0..=last {
            let down = if level > 0 { Some(Conv::new(store, &format!("control.down{level}"), width, width, 3, 2, 1.0, rng)?) } else { None };
            let block = ControlBlock::new(store, &format!("control.block{level}"), width, rng)?;
            let output = if config.has_attention(level) {
                let proj = Conv::new(store, &format!("control.proj{level}"), width, config.level_channels(level), 1, 1, 1.0, rng)?;
                // zero scale: a fresh encoder injects nothing
                let scale = store.add_zeros(format!("control.scale{level}"), &[1])?;
                Some((proj, scale))
            } else {
                None
            };
            stages.push(ControlStage { level, down, block, output });
        }
        Ok(Self { stem, stages, raster_channels, height: config.image_height, width: config.image_width, patch: f })
    }

    pub fn raster_channels(&self) -> usize {
        self.raster_channels
    }

    /// One feature map per attention level, each at that level's resolution.
    pub fn encode_signal<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, raster: &crate::image::Image) -> Result<Vec<LevelControl>> {
        if (raster.channels, raster.height, raster.width) != (self.raster_channels, self.height, self.width) {
            return Err(Error::Shape(format!(
                "signal raster is {}x{}x{}, encoder expects {}x{}x{}",
                raster.channels, raster.height, raster.width, self.raster_channels, self.height, self.width
            )));
        }
        let x = g.input(patchify(&raster.to_tensor::<T>(), self.patch)?)?;
        self.encode_latent(g, store, x)
    }

    /// Same as [`encode_signal`](Self::encode_signal) on an already
    /// patchified raster node.
    pub fn encode_latent<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Vec<LevelControl>> {
        let h = self.stem.forward(g, store, x)?;
        let mut h = g.silu(h)?;
        let mut out = Vec::new();
        for s in &self.stages {
            if let Some(d) = &s.down {
                h = d.forward(g, store, h)?;
            }
            h = s.block.forward(g, store, h)?;
            if let Some((proj, scale)) = &s.output {
                let features = proj.forward(g, store, h)?;
                out.push(LevelControl { level: s.level, features, scale: g.param(store, *scale) });
            }
        }
        Ok(out)
    }
}

/// Adds `scale * features` to the target frame; the source frame node is
/// returned as is.
pub fn inject_target_only<T: Scalar>(g: &mut Graph<T>, frames: (Var, Var), control: &LevelControl) -> Result<(Var, Var)> {
    if g.shape(frames.1) != g.shape(control.features) {
        return Err(Error::Shape(format!(
            "control features {:?} do not match level {} activations {:?}",
            g.shape(control.features),
            control.level,
            g.shape(frames.1)
        )));
    }
    let scaled = g.mul_scalar(control.features, control.scale)?;
    Ok((frames.0, g.add(frames.1, scaled)?))
}

/// For each drag pair, adds the source-frame token under the source point
/// to the target-frame token under the target point. Tokens are `[N, d]`
/// on a `grid_height x grid_width` grid with `stride`-pixel cells.
pub fn drag_token_inject<T: Scalar>(
    g: &mut Graph<T>,
    tokens: (Var, Var),
    points: &DragPointSet,
    grid_height: usize,
    grid_width: usize,
    stride: usize,
) -> Result<(Var, Var)> {
    if points.is_empty() {
        return Ok(tokens);
    }
    let pairs = points.token_pairs(grid_width, grid_height, stride)?;
    Ok((tokens.0, g.add_rows(tokens.1, tokens.0, &pairs)?))
}
