//! Forward noising, the diffusion and matching losses, and the Euler sampler.

mod correspondence;
mod sampler;

pub use correspondence::Correspondence;
pub use sampler::{euler_sample, DEFAULT_SAMPLE_STEPS};

use crate::attention::AttentionRecord;
use crate::backbone::{LatentPair, RecordVar};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_LAMBDA_MATCH: f64 = 1.0;

/// Cosine cumulative-signal schedule, `alpha_bar(0) = 1` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MIN_ALPHA_BAR: f64 = 1e-4;

/// The cosine schedule at a possibly fractional step `t` of `steps`.
pub fn cosine_alpha_bar(t: f64, steps: usize) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let f = |t: f64| (((t / steps as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    (f(t) / f(0.0)).clamp(MIN_ALPHA_BAR, 1.0)
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        Ok(Self { alpha_bar: (0..steps).map(|t| cosine_alpha_bar(t as f64, steps)).collect() })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::OutOfBounds(format!("step {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }

    pub fn signal(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar(t)?.sqrt())
    }

    pub fn noise(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// Noise-to-signal ratio `sqrt((1 - a) / a)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        Ok(((1.0 - a) / a).sqrt())
    }
}

/// `z_t = signal(t) * z0 + noise(t) * eps`, frame by frame.
pub fn add_noise<T: Scalar>(schedule: &NoiseSchedule, z0: &LatentPair<T>, t: usize, eps: &LatentPair<T>) -> Result<LatentPair<T>> {
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!("latent {:?} vs noise {:?}", z0.shape(), eps.shape())));
    }
    if t == 0 {
        schedule.check(t)?;
        return Ok(z0.clone());
    }
    let (a, b) = (T::of(schedule.signal(t)?), T::of(schedule.noise(t)?));
    let mix = |x: &Tensor<T>, e: &Tensor<T>| {
        let data = x.data().iter().zip(e.data()).map(|(&x, &e)| a * x + b * e).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    };
    LatentPair::new(mix(&z0.source, &eps.source), mix(&z0.target, &eps.target), z0.patch)
}

/// Per-frame mean squared error: the target frame always, plus the source
/// frame when `reconstruct_source`. Each frame contributes its own mean.
pub fn diffusion_loss<T: Scalar>(g: &mut Graph<T>, eps_hat: (Var, Var), eps: &LatentPair<T>, reconstruct_source: bool) -> Result<Var> {
    let n = eps.target.numel() as f64;
    let tgt = g.masked_sq_err(eps_hat.1, &eps.target, None)?;
    let tgt = g.scale(tgt, 1.0 / n)?;
    if !reconstruct_source {
        return Ok(tgt);
    }
    let src = g.masked_sq_err(eps_hat.0, &eps.source, None)?;
    let src = g.scale(src, 1.0 / n)?;
    Ok(g.add(tgt, src)?)
}

pub fn diffusion_loss_value<T: Scalar>(eps_hat: &LatentPair<T>, eps: &LatentPair<T>, reconstruct_source: bool) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.input(eps_hat.source.clone())?;
    let t = g.input(eps_hat.target.clone())?;
    let l = diffusion_loss(&mut g, (s, t), eps, reconstruct_source)?;
    Ok(g.value(l).data()[0].f64())
}

fn find_correspondence<'a>(corrs: &'a [Correspondence], height: usize, width: usize, layer: &str) -> Result<&'a Correspondence> {
    corrs
        .iter()
        .find(|c| (c.height, c.width) == (height, width))
        .ok_or_else(|| Error::Shape(format!("no correspondence at {height}x{width} tokens for layer {layer}")))
}

/// Masked squared error between each attention map and its correspondence,
/// divided by the visible-row count (at least one), averaged over layers.
/// No layers gives a constant zero.
pub fn matching_loss<T: Scalar>(g: &mut Graph<T>, records: &[RecordVar], corrs: &[Correspondence]) -> Result<Var> {
    if records.is_empty() {
        return Ok(g.input(Tensor::scalar(T::zero()))?);
    }
    let mut total: Option<Var> = None;
    for r in records {
        let c = find_correspondence(corrs, r.height, r.width, &r.layer_id)?;
        let mask = c.mask::<T>();
        let visible = c.visible_count().max(1) as f64;
        let err = g.masked_sq_err(r.map, &c.dense(), Some(&mask))?;
        let err = g.scale(err, 1.0 / visible)?;
        total = Some(match total {
            Some(acc) => g.add(acc, err)?,
            None => err,
        });
    }
    Ok(g.scale(total.expect("records are non-empty"), 1.0 / records.len() as f64)?)
}

pub fn matching_loss_value<T: Scalar>(records: &[AttentionRecord<T>], corrs: &[Correspondence]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = records
        .iter()
        .map(|r| Ok(RecordVar { layer_id: r.layer_id.clone(), map: g.input(r.a_match.clone())?, height: r.height, width: r.width }))
        .collect::<Result<Vec<_>>>()?;
    let l = matching_loss(&mut g, &vars, corrs)?;
    Ok(g.value(l).data()[0].f64())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_diff: f64,
    pub l_match: f64,
    pub l_total: f64,
    pub lambda_match: f64,
}

pub fn combined_loss(l_diff: f64, l_match: f64, lambda_match: f64) -> Result<LossReport> {
    if !(l_diff.is_finite() && l_match.is_finite() && lambda_match.is_finite()) {
        return Err(Error::Rejected(format!("non-finite loss terms ({l_diff}, {l_match}, {lambda_match})")));
    }
    Ok(LossReport { l_diff, l_match, l_total: l_diff + lambda_match * l_match, lambda_match })
}

/// Graph form of the combined objective.
pub fn combined_loss_var<T: Scalar>(g: &mut Graph<T>, l_diff: Var, l_match: Var, lambda_match: f64) -> Result<Var> {
    let m = g.scale(l_match, lambda_match)?;
    Ok(g.add(l_diff, m)?)
}
