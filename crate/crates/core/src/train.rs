//! AdamW training on the combined diffusion + matching objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{encode_image, EditModel, LatentPair, ModelInputs};
use crate::datagen::{EditSignal, SamplePair};
use crate::diffusion::{add_noise, combined_loss, combined_loss_var, diffusion_loss, matching_loss, Correspondence, LossReport, NoiseSchedule};
use crate::image::Image;
use crate::numerics::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub lambda_match: f64,
    pub reconstruct_source: bool,
    pub diffusion_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 1,
            lr: 1e-3,
            min_lr_ratio: 0.1,
            warmup_steps: 100,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 1.0,
            lambda_match: crate::diffusion::DEFAULT_LAMBDA_MATCH,
            reconstruct_source: true,
            diffusion_steps: crate::diffusion::DEFAULT_TRAIN_STEPS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.diffusion_steps == 0 {
            return Err(Error::Config("batch_size and diffusion_steps must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config(format!("invalid learning rate {} / floor ratio {}", self.lr, self.min_lr_ratio)));
        }
        if !(self.lambda_match >= 0.0 && self.lambda_match.is_finite()) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lambda_match must be non-negative and grad_clip positive".into()));
        }
        Ok(())
    }

    /// Linear warmup, then cosine decay to `min_lr_ratio * lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let p = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// One training tuple with its latents precomputed.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub source: Image,
    pub target: Image,
    pub signal: EditSignal,
    pub correspondences: Vec<Correspondence>,
    pub latents: LatentPair<f32>,
}

impl TrainingSample {
    pub fn new(source: Image, target: Image, signal: EditSignal, correspondences: Vec<Correspondence>, patch: usize) -> Result<Self> {
        let latents = LatentPair::new(encode_image(&source, patch)?, encode_image(&target, patch)?, patch)?;
        Ok(Self { source, target, signal, correspondences, latents })
    }

    pub fn from_pair(pair: &SamplePair, patch: usize) -> Result<Self> {
        Self::new(pair.source.clone(), pair.target.clone(), pair.signal.clone(), pair.correspondences.clone(), patch)
    }
}

pub(crate) fn gaussian_like(t: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
    let data = (0..t.numel()).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Forward and backward on one sample at step `t` with noise `eps`;
/// gradients accumulate into `store`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_sample(
    model: &EditModel,
    store: &mut ParamStore<f32>,
    schedule: &NoiseSchedule,
    sample: &TrainingSample,
    t: usize,
    eps: &LatentPair<f32>,
    lambda_match: f64,
    reconstruct_source: bool,
) -> Result<LossReport> {
    let noisy = add_noise(schedule, &sample.latents, t, eps)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, &ModelInputs { noisy: &noisy, t: t as f64, source_latent: &sample.latents.source, signal: Some(&sample.signal) })?;
    let d = &out.denoised;
    let l_diff = diffusion_loss(&mut g, (d.eps_source, d.eps_target), eps, reconstruct_source)?;
    let l_match = matching_loss(&mut g, &d.records, &sample.correspondences)?;
    let total = combined_loss_var(&mut g, l_diff, l_match, lambda_match)?;
    g.backward(total)?;
    g.accumulate_into(store);
    combined_loss(g.value(l_diff).data()[0] as f64, g.value(l_match).data()[0] as f64, lambda_match)
}

fn grad_norm(store: &ParamStore<f32>) -> f64 {
    store.iter().flat_map(|(_, p)| p.grad.data().iter()).map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
}

/// Runs `config.steps` optimizer steps, calling `on_step` with the mean
/// batch loss after each. Pure in `(model init, data, config)`.
pub fn train(
    model: &EditModel,
    store: &mut ParamStore<f32>,
    data: &[TrainingSample],
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossReport) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(s) = data.iter().find(|s| s.signal.kind() != model.config().signal) {
        return Err(Error::Config(format!("model trains on {} signals but the data holds {}", model.config().signal, s.signal.kind())));
    }
    let schedule = NoiseSchedule::cosine(config.diffusion_steps)?;
    let mut opt = AdamW::new(AdamWConfig { lr: config.lr, beta1: config.beta1, beta2: config.beta2, eps: 1e-8, weight_decay: config.weight_decay }, store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    store.zero_grad();
    for step in 0..config.steps {
        let (mut l_diff, mut l_match) = (0.0, 0.0);
        for _ in 0..config.batch_size {
            let sample = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(0..schedule.steps());
            let eps = LatentPair::new(gaussian_like(&sample.latents.source, &mut rng), gaussian_like(&sample.latents.target, &mut rng), sample.latents.patch)?;
            let r = accumulate_sample(model, store, &schedule, sample, t, &eps, config.lambda_match, config.reconstruct_source)?;
            l_diff += r.l_diff;
            l_match += r.l_match;
        }
        let b = config.batch_size as f64;
        let norm = grad_norm(store) / b;
        let clip = if norm > config.grad_clip { config.grad_clip / norm } else { 1.0 };
        opt.step(store, clip / b, config.lr_at(step));
        let report = combined_loss(l_diff / b, l_match / b, config.lambda_match)?;
        on_step(step, &report)?;
    }
    Ok(())
}
