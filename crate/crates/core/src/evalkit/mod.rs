//! SSIM, matching accuracy, attention heatmaps, and the ablation table.

mod ablation;

pub use ablation::{ablation_row, run_ablation, AblationArm, AblationRow, AblationTable};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionRecord;
use crate::backbone::{EditModel, LatentPair, ModelInputs};
use crate::datagen::splitmix64;
use crate::diffusion::{add_noise, euler_sample, Correspondence, NoiseSchedule, DEFAULT_SAMPLE_STEPS};
use crate::image::Image;
use crate::numerics::{Graph, ParamStore, Scalar};
use crate::train::{gaussian_like, TrainingSample};
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over every fully contained Gaussian window, on luma for RGB.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_C1, SSIM_C2)
}

pub fn ssim_with(a: &Image, b: &Image, window: usize, c1: f64, c2: f64) -> Result<f64> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::Shape(format!("SSIM of {}x{}x{} and {}x{}x{} images", a.channels, a.height, a.width, b.channels, b.height, b.width)));
    }
    if window == 0 || a.height < window || a.width < window {
        return Err(Error::Shape(format!("{}x{} image is smaller than the {window}-pixel window", a.height, a.width)));
    }
    let (x, y) = (a.luma(), b.luma());
    let k = gaussian_window(window, SSIM_SIGMA);
    let (h, w) = (a.height, a.width);
    let (oh, ow) = (h - window + 1, w - window + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, &ky) in k.iter().enumerate() {
                for (dx, &kx) in k.iter().enumerate() {
                    let wt = ky * kx;
                    let i = (oy + dy) * w + ox + dx;
                    let (xv, yv) = (x[i] as f64, y[i] as f64);
                    mx += wt * xv;
                    my += wt * yv;
                    sxx += wt * (xv * xv);
                    syy += wt * (yv * yv);
                    sxy += wt * (xv * yv);
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Argmax hits over visible target tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchingAccuracy {
    /// Mean of the per-layer hit rates; NaN when no layer had a visible token.
    pub value: f64,
    pub visible: usize,
    pub correct: usize,
}

impl MatchingAccuracy {
    pub fn is_defined(&self) -> bool {
        self.visible > 0
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

fn layer_hits<T: Scalar>(record: &AttentionRecord<T>, corrs: &[Correspondence]) -> Result<(usize, usize)> {
    let c = corrs
        .iter()
        .find(|c| (c.height, c.width) == (record.height, record.width))
        .ok_or_else(|| Error::Shape(format!("no correspondence at {}x{} tokens for {}", record.height, record.width, record.layer_id)))?;
    let (mut visible, mut correct) = (0, 0);
    for (i, m) in c.matches().iter().enumerate() {
        if let Some(j) = m {
            visible += 1;
            if argmax(record.row(i)) == *j {
                correct += 1;
            }
        }
    }
    Ok((visible, correct))
}

/// Fraction of visible target tokens whose attention argmax (first index
/// on ties) is their corresponding source token, averaged over layers.
pub fn matching_accuracy<T: Scalar>(records: &[AttentionRecord<T>], corrs: &[Correspondence]) -> Result<MatchingAccuracy> {
    let (mut rates, mut visible, mut correct) = (Vec::new(), 0, 0);
    for r in records {
        let (v, c) = layer_hits(r, corrs)?;
        if v > 0 {
            rates.push(c as f64 / v as f64);
        }
        visible += v;
        correct += c;
    }
    let value = if rates.is_empty() { f64::NAN } else { rates.iter().sum::<f64>() / rates.len() as f64 };
    Ok(MatchingAccuracy { value, visible, correct })
}

/// Greyscale raster with 8-bit pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Row `query` of the map over the source grid, min-max scaled to 0..=255
/// (a constant row maps to all zeros) and upsampled by nearest neighbour.
pub fn export_attention_heatmap<T: Scalar>(record: &AttentionRecord<T>, query: usize, height: usize, width: usize) -> Result<Heatmap> {
    if query >= record.tokens() {
        return Err(Error::OutOfBounds(format!("query token {query} of {}", record.tokens())));
    }
    if height < record.height || width < record.width {
        return Err(Error::Shape(format!("{height}x{width} heatmap is smaller than the {}x{} token grid", record.height, record.width)));
    }
    let row: Vec<f64> = record.row(query).iter().map(|v| v.f64()).collect();
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level: Vec<u8> = row.iter().map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 }).collect();
    let mut pixels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            pixels.push(level[(y * record.height / height) * record.width + x * record.width / width]);
        }
    }
    Ok(Heatmap { width, height, pixels })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub sample_steps: usize,
    pub seed: u64,
    /// Diffusion steps at which attention maps are scored.
    pub match_timesteps: Vec<usize>,
    pub diffusion_steps: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { sample_steps: DEFAULT_SAMPLE_STEPS, seed: 0, match_timesteps: vec![100, 300, 500], diffusion_steps: crate::diffusion::DEFAULT_TRAIN_STEPS }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_sample_ssim: Vec<f64>,
    pub mean_ssim: f64,
    pub matching: Option<MatchingAccuracy>,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
}

/// Attention maps of every matching layer for `sample` noised to step `t`.
pub fn attention_records(
    model: &EditModel,
    store: &ParamStore<f32>,
    schedule: &NoiseSchedule,
    sample: &TrainingSample,
    t: usize,
    noise_seed: u64,
) -> Result<Vec<AttentionRecord<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let z = &sample.latents;
    let eps = LatentPair::new(gaussian_like(&z.source, &mut rng), gaussian_like(&z.target, &mut rng), z.patch)?;
    let noisy = add_noise(schedule, z, t, &eps)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, &ModelInputs { noisy: &noisy, t: t as f64, source_latent: &z.source, signal: Some(&sample.signal) })?;
    Ok(out
        .denoised
        .records
        .iter()
        .map(|r| AttentionRecord { layer_id: r.layer_id.clone(), a_match: g.value(r.map).clone(), height: r.height, width: r.width })
        .collect())
}

/// Matching accuracy pooled over samples and the configured timesteps;
/// `None` for models without a matching branch.
pub fn evaluate_matching(model: &EditModel, store: &ParamStore<f32>, samples: &[TrainingSample], opts: &EvalOptions) -> Result<Option<MatchingAccuracy>> {
    let schedule = NoiseSchedule::cosine(opts.diffusion_steps)?;
    let mut per_layer: Vec<(usize, usize)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for &t in &opts.match_timesteps {
            let records = attention_records(model, store, &schedule, s, t, splitmix64(opts.seed ^ splitmix64(i as u64) ^ t as u64))?;
            if records.is_empty() {
                return Ok(None);
            }
            per_layer.resize(records.len(), (0, 0));
            for (acc, r) in per_layer.iter_mut().zip(&records) {
                let (v, c) = layer_hits(r, &s.correspondences)?;
                acc.0 += v;
                acc.1 += c;
            }
        }
    }
    let rates: Vec<f64> = per_layer.iter().filter(|(v, _)| *v > 0).map(|&(v, c)| c as f64 / v as f64).collect();
    let visible = per_layer.iter().map(|p| p.0).sum();
    let correct = per_layer.iter().map(|p| p.1).sum();
    let value = if rates.is_empty() { f64::NAN } else { rates.iter().sum::<f64>() / rates.len() as f64 };
    Ok(Some(MatchingAccuracy { value, visible, correct }))
}

/// Samples an edit for every eval pair and scores it against the true
/// target; also scores matching attention when the model has it.
pub fn evaluate(model: &EditModel, store: &ParamStore<f32>, samples: &[TrainingSample], opts: &EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let schedule = NoiseSchedule::cosine(opts.diffusion_steps)?;
    let per_sample_ssim = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let out = euler_sample(model, store, &schedule, &s.source, &s.signal, opts.sample_steps, splitmix64(opts.seed ^ i as u64))?;
            ssim(&out, &s.target)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_ssim = per_sample_ssim.iter().sum::<f64>() / per_sample_ssim.len() as f64;
    let matching = evaluate_matching(model, store, samples, opts)?;
    let c = model.config();
    let fingerprint = format!(
        "{}/{}/c{}/m{:?}/a{:?}/h{}",
        c.signal, c.backbone.attention_mode, c.backbone.base_channels, c.backbone.multipliers, c.backbone.attention_levels, c.backbone.heads
    );
    Ok(EvalReport { per_sample_ssim, mean_ssim, matching, fingerprint, seeds: vec![opts.seed] })
}
