use rand::Rng;

use super::layers::{from_tokens, timestep_embedding, to_tokens, Conv, CrossAttention, GroupNorm, LayerNorm, Linear, ResBlock};
use super::{AttentionMode, BackboneConfig};
use crate::attention::{init_matching_from_spatial, ops, AttentionWeights};
use crate::control::{drag_token_inject, inject_target_only, DragPointSet, LevelControl};
use crate::numerics::{Axis, Graph, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

/// A matching-attention map still on the graph, so a loss can reach it.
#[derive(Clone, Debug)]
pub struct RecordVar {
    pub layer_id: String,
    pub map: Var,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct DenoiseOutput {
    pub eps_source: Var,
    pub eps_target: Var,
    pub records: Vec<RecordVar>,
}

struct AttnSite {
    id: String,
    norm1: LayerNorm,
    spatial: AttentionWeights,
    branch: AttentionWeights,
    norm2: LayerNorm,
    cross: CrossAttention,
    level: usize,
}

impl AttnSite {
    fn new<T: Scalar>(store: &mut ParamStore<T>, id: String, level: usize, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let dim = config.level_channels(level);
        let norm1 = LayerNorm::new(store, &format!("{id}.norm1"), dim)?;
        let spatial = AttentionWeights::new(store, &format!("{id}.spatial"), dim, config.heads, rng)?;
        // the frame-interaction branch starts as a copy of the spatial weights
        // in every mode, so ablation arms differ only in how it is wired
        let branch = init_matching_from_spatial(store, &format!("{id}.branch"), &spatial)?;
        let norm2 = LayerNorm::new(store, &format!("{id}.norm2"), dim)?;
        let cross = CrossAttention::new(store, &format!("{id}.cross"), dim, config.embed_dim, config.heads, rng)?;
        Ok(Self { id, norm1, spatial, branch, norm2, cross, level })
    }
}

/// U-Net over `[C, h, w]` latents, applied to the source and target frames
/// in lockstep with shared weights.
pub struct Denoiser {
    config: BackboneConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    down: Vec<Option<Conv>>,
    enc_res: Vec<ResBlock>,
    enc_attn: Vec<Option<AttnSite>>,
    up: Vec<Option<Conv>>,
    dec_res: Vec<ResBlock>,
    dec_attn: Vec<Option<AttnSite>>,
    norm_out: GroupNorm,
    conv_out: Conv,
    // time-conditioned per-channel gains on the conv input: `exp(.)` on the
    // noisy frame, `-exp(.)` on the clean source
    skip: Linear,
}

impl Denoiser {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let levels = config.levels();
        let e = config.embed_dim;
        let gr = config.norm_groups;
        let time1 = Linear::new(store, "unet.time1", e, e, rng)?;
        let time2 = Linear::new(store, "unet.time2", e, e, rng)?;
        let conv_in = Conv::new(store, "unet.conv_in", 2 * config.latent_channels(), config.level_channels(0), 3, 1, 1.0, rng)?;
        let mut down = Vec::new();
        let mut enc_res = Vec::new();
        let mut enc_attn = Vec::new();
        for l in 0..levels {
            let c = config.level_channels(l);
            down.push(if l > 0 { Some(Conv::new(store, &format!("unet.down{l}"), config.level_channels(l - 1), c, 3, 2, 1.0, rng)?) } else { None });
            enc_res.push(ResBlock::new(store, &format!("unet.enc{l}"), c, c, e, gr, rng)?);
            enc_attn.push(if config.has_attention(l) { Some(AttnSite::new(store, format!("unet.enc{l}.attn"), l, config, rng)?) } else { None });
        }
        let mut up = Vec::new();
        let mut dec_res = Vec::new();
        let mut dec_attn = Vec::new();
        for l in (0..levels).rev() {
            let c = config.level_channels(l);
            up.push(if l + 1 < levels { Some(Conv::new(store, &format!("unet.up{l}"), config.level_channels(l + 1), c, 3, 1, 1.0, rng)?) } else { None });
            dec_res.push(ResBlock::new(store, &format!("unet.dec{l}"), 2 * c, c, e, gr, rng)?);
            dec_attn.push(if config.has_attention(l) { Some(AttnSite::new(store, format!("unet.dec{l}.attn"), l, config, rng)?) } else { None });
        }
        let c0 = config.level_channels(0);
        let norm_out = GroupNorm::new(store, "unet.norm_out", c0, gr)?;
        let conv_out = Conv::new(store, "unet.conv_out", c0, config.latent_channels(), 3, 1, 0.5, rng)?;
        let skip = Linear::new(store, "unet.skip", e, 2 * config.latent_channels(), rng)?;
        Ok(Self { config: config.clone(), time1, time2, conv_in, down, enc_res, enc_attn, up, dec_res, dec_attn, norm_out, conv_out, skip })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn attention_site<T: Scalar>(
        &self,
        site: &AttnSite,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        frames: (Var, Var),
        embedding: Var,
        drag: Option<&DragPointSet>,
        records: &mut Vec<RecordVar>,
    ) -> Result<(Var, Var)> {
        let (gh, gw) = self.config.level_grid(site.level);
        let xs = to_tokens(g, frames.0)?;
        let xt = to_tokens(g, frames.1)?;
        let ns = site.norm1.forward(g, store, xs)?;
        let nt = site.norm1.forward(g, store, xt)?;
        let os = ops::spatial(g, store, &site.spatial, ns)?;
        let ot = ops::spatial(g, store, &site.spatial, nt)?;
        let (os, ot) = match self.config.attention_mode {
            AttentionMode::Matching => {
                let (m, map) = ops::matching(g, store, &site.branch, nt, ns)?;
                records.push(RecordVar { layer_id: site.id.clone(), map, height: gh, width: gw });
                ops::fuse(g, (os, ot), m)?
            }
            AttentionMode::CrossFrame => {
                let c = ops::cross_frame(g, store, &site.branch, nt, ns)?;
                (os, g.add(ot, c)?)
            }
            AttentionMode::Temporal => {
                let (ts, tt) = ops::temporal(g, store, &site.branch, ns, nt)?;
                (g.add(os, ts)?, g.add(ot, tt)?)
            }
        };
        let mut out = [g.add(xs, os)?, g.add(xt, ot)?];
        for x in out.iter_mut() {
            let n = site.norm2.forward(g, store, *x)?;
            let c = site.cross.forward(g, store, n, embedding)?;
            *x = g.add(*x, c)?;
        }
        let [mut xs, mut xt] = out;
        if let Some(d) = drag {
            (xs, xt) = drag_token_inject(g, (xs, xt), d, gh, gw, self.config.level_stride(site.level))?;
        }
        Ok((from_tokens(g, xs, gh, gw)?, from_tokens(g, xt, gh, gw)?))
    }

    /// Predicts the noise in both frames. `noisy` and `source_latent` are
    /// `[C_lat, h, w]`; `embedding` is `[n_emb, embed_dim]`; `t` is the
    /// diffusion step. Control features land on the target frame only.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        noisy: (Var, Var),
        t: f64,
        source_latent: Var,
        embedding: Var,
        control: Option<&[LevelControl]>,
        drag: Option<&DragPointSet>,
    ) -> Result<DenoiseOutput> {
        let cfg = &self.config;
        let lat = [cfg.latent_channels(), cfg.image_height / cfg.patch, cfg.image_width / cfg.patch];
        for (what, v) in [("noisy source", noisy.0), ("noisy target", noisy.1), ("source latent", source_latent)] {
            if g.shape(v) != lat {
                return Err(Error::Shape(format!("{what} latent is {:?}, expected {lat:?}", g.shape(v))));
            }
        }
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::Config(format!("noise level {t} must be finite and non-negative")));
        }
        if let Some(d) = drag {
            if (d.width, d.height) != (cfg.image_width, cfg.image_height) {
                return Err(Error::OutOfBounds(format!(
                    "drag points for a {}x{} image given to a {}x{} model",
                    d.width, d.height, cfg.image_width, cfg.image_height
                )));
            }
        }
        if let Some(ctrl) = control {
            for c in ctrl {
                if !cfg.has_attention(c.level) {
                    return Err(Error::Shape(format!("control features for level {} which carries no attention", c.level)));
                }
            }
        }

        let temb = g.input(timestep_embedding(t, cfg.embed_dim))?;
        let temb = self.time1.forward(g, store, temb)?;
        let temb = g.silu(temb)?;
        let temb = self.time2.forward(g, store, temb)?;
        let temb = g.silu(temb)?;

        let mut records = Vec::new();
        let xs = g.concat0(&[noisy.0, source_latent])?;
        let xt = g.concat0(&[noisy.1, source_latent])?;
        let mut h = (self.conv_in.forward(g, store, xs)?, self.conv_in.forward(g, store, xt)?);
        let mut skips = Vec::with_capacity(cfg.levels());
        for l in 0..cfg.levels() {
            if let Some(d) = &self.down[l] {
                h = (d.forward(g, store, h.0)?, d.forward(g, store, h.1)?);
            }
            if let Some(ctrl) = control {
                for c in ctrl.iter().filter(|c| c.level == l) {
                    h = inject_target_only(g, h, c)?;
                }
            }
            let tb = self.enc_res[l].time_bias(g, store, temb)?;
            h = (self.enc_res[l].forward(g, store, h.0, tb)?, self.enc_res[l].forward(g, store, h.1, tb)?);
            if let Some(site) = &self.enc_attn[l] {
                h = self.attention_site(site, g, store, h, embedding, drag, &mut records)?;
            }
            skips.push(h);
        }
        for (i, l) in (0..cfg.levels()).rev().enumerate() {
            if let Some(u) = &self.up[i] {
                let a = g.upsample2x(h.0)?;
                let b = g.upsample2x(h.1)?;
                h = (u.forward(g, store, a)?, u.forward(g, store, b)?);
            }
            let s = skips[l];
            let a = g.concat0(&[h.0, s.0])?;
            let b = g.concat0(&[h.1, s.1])?;
            let tb = self.dec_res[i].time_bias(g, store, temb)?;
            h = (self.dec_res[i].forward(g, store, a, tb)?, self.dec_res[i].forward(g, store, b, tb)?);
            if let Some(site) = &self.dec_attn[i] {
                h = self.attention_site(site, g, store, h, embedding, drag, &mut records)?;
            }
        }
        let c = cfg.latent_channels();
        let gain = self.skip.forward(g, store, temb)?;
        let gain = g.reshape(gain, &[2 * c])?;
        let gain = g.exp(gain)?;
        let sign = g.input(Tensor::new(vec![2 * c], (0..2 * c).map(|i| if i < c { T::one() } else { -T::one() }).collect())?)?;
        let gain = g.mul(gain, sign)?;
        let mut out = [h.0, h.1];
        for (x, z) in out.iter_mut().zip([xs, xt]) {
            let n = self.norm_out.forward(g, store, *x)?;
            let n = g.silu(n)?;
            let e = self.conv_out.forward(g, store, n)?;
            let s = g.mul_vec(z, gain, Axis::First)?;
            let s0 = g.slice0(s, 0, c)?;
            let s1 = g.slice0(s, c, 2 * c)?;
            let s = g.add(s0, s1)?;
            *x = g.add(e, s)?;
        }
        Ok(DenoiseOutput { eps_source: out[0], eps_target: out[1], records })
    }
}
