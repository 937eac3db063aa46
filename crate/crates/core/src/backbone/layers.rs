use rand::Rng;

use crate::attention::ops;
use crate::numerics::{Axis, Graph, ParamId, ParamStore, Scalar, Var};
use crate::{Error, Result};

pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = gain / ((cin * k * k) as f64).sqrt();
        Ok(Self {
            w: store.add_normal(format!("{name}.w"), &[cout, cin, k, k], std, rng)?,
            b: store.add_zeros(format!("{name}.b"), &[cout])?,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        Ok(g.add_bias(y, b, Axis::First)?)
    }
}

pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self { w: store.add_normal(format!("{name}.w"), &[din, dout], 1.0 / (din as f64).sqrt(), rng)?, b: store.add_zeros(format!("{name}.b"), &[dout])? })
    }

    /// `[n, din] -> [n, dout]`
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w, false, false)?;
        Ok(g.add_bias(y, b, Axis::Last)?)
    }
}

/// Group norm on `[C, H, W]` with a per-channel affine.
pub(crate) struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

pub(crate) const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let groups = groups.min(channels);
        if !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!("{groups} norm groups do not divide {channels} channels")));
        }
        Ok(Self { gamma: store.add_ones(format!("{name}.gamma"), &[channels])?, beta: store.add_zeros(format!("{name}.beta"), &[channels])?, groups })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.normalize_rows(x, self.groups, NORM_EPS)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_vec(n, gamma, Axis::First)?;
        Ok(g.add_bias(y, beta, Axis::First)?)
    }
}

/// Layer norm over the last axis of `[N, d]` tokens.
pub(crate) struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { gamma: store.add_ones(format!("{name}.gamma"), &[dim])?, beta: store.add_zeros(format!("{name}.beta"), &[dim])? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let rows = g.shape(x)[0];
        let n = g.normalize_rows(x, rows, NORM_EPS)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_vec(n, gamma, Axis::Last)?;
        Ok(g.add_bias(y, beta, Axis::Last)?)
    }
}

/// Pre-norm residual block with an additive per-channel time bias.
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
    channels: usize,
}

impl ResBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, time_dim: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups)?,
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1.0, rng)?,
            time: Linear::new(store, &format!("{name}.time"), time_dim, cout, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups)?,
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 0.5, rng)?,
            skip: if cin != cout { Some(Conv::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 1.0, rng)?) } else { None },
            channels: cout,
        })
    }

    /// Time bias for this block, shared by both frames.
    pub fn time_bias<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, temb: Var) -> Result<Var> {
        let t = self.time.forward(g, store, temb)?;
        Ok(g.reshape(t, &[self.channels])?)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, time_bias: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = g.silu(h)?;
        let h = self.conv1.forward(g, store, h)?;
        let h = g.add_bias(h, time_bias, Axis::First)?;
        let h = self.norm2.forward(g, store, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, store, x)?,
            None => x,
        };
        Ok(g.add(s, h)?)
    }
}

/// Multi-head attention from feature tokens `[N, d]` onto embedding tokens `[M, e]`.
pub(crate) struct CrossAttention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wout: ParamId,
    heads: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, embed_dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let (sd, se) = (1.0 / (dim as f64).sqrt(), 1.0 / (embed_dim as f64).sqrt());
        Ok(Self {
            wq: store.add_normal(format!("{name}.wq"), &[dim, dim], sd, rng)?,
            wk: store.add_normal(format!("{name}.wk"), &[embed_dim, dim], se, rng)?,
            wv: store.add_normal(format!("{name}.wv"), &[embed_dim, dim], se, rng)?,
            wout: store.add_normal(format!("{name}.wout"), &[dim, dim], sd, rng)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, embedding: Var) -> Result<Var> {
        let (wq, wk, wv, wo) = (g.param(store, self.wq), g.param(store, self.wk), g.param(store, self.wv), g.param(store, self.wout));
        let q = g.matmul(x, wq, false, false)?;
        let k = g.matmul(embedding, wk, false, false)?;
        let v = g.matmul(embedding, wv, false, false)?;
        let q = ops::split_heads(g, q, self.heads)?;
        let k = ops::split_heads(g, k, self.heads)?;
        let v = ops::split_heads(g, v, self.heads)?;
        let (o, _) = ops::attend(g, q, k, v)?;
        let o = ops::merge_heads(g, o)?;
        Ok(g.matmul(o, wo, false, false)?)
    }
}

/// `[C, H, W] -> [H*W, C]`
pub(crate) fn to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1] * s[2]])?;
    Ok(g.transpose(r)?)
}

/// `[H*W, C] -> [C, H, W]`
pub(crate) fn from_tokens<T: Scalar>(g: &mut Graph<T>, x: Var, height: usize, width: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let t = g.transpose(x)?;
    Ok(g.reshape(t, &[c, height, width])?)
}

/// Sinusoidal embedding of a diffusion step, `[1, dim]`.
pub(crate) fn timestep_embedding<T: Scalar>(t: f64, dim: usize) -> crate::numerics::Tensor<T> {
    let half = dim / 2;
    let mut v = vec![T::zero(); dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        v[k] = T::of((t * freq).sin());
        v[half + k] = T::of((t * freq).cos());
    }
    crate::numerics::Tensor::new(vec![1, dim], v).expect("positive dim")
}
