use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::NoiseSchedule;
use crate::backbone::{decode_latent, encode_image, EditModel, LatentPair, ModelInputs};
use crate::datagen::EditSignal;
use crate::image::Image;
use crate::numerics::{ParamStore, Tensor};
use crate::{Error, Result};

pub const DEFAULT_SAMPLE_STEPS: usize = 25;

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Deterministic first-order integration in `sigma` space from pure noise
/// to `sigma = 0`. Both frames are denoised jointly; the target frame is
/// returned as an image clipped to `[0, 1]`.
pub fn euler_sample(
    model: &EditModel,
    store: &ParamStore<f32>,
    schedule: &NoiseSchedule,
    source: &Image,
    signal: &EditSignal,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    if signal.kind() != model.config().signal {
        return Err(Error::Config(format!("model trained for {} signals was given a {} signal", model.config().signal, signal.kind())));
    }
    let cfg = model.backbone();
    if (source.channels, source.height, source.width) != (3, cfg.image_height, cfg.image_width) {
        return Err(Error::Shape(format!(
            "source image is {}x{}x{}, model expects 3x{}x{}",
            source.channels, source.height, source.width, cfg.image_height, cfg.image_width
        )));
    }
    let source_latent: Tensor<f32> = encode_image(source, cfg.patch)?;
    let shape = source_latent.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = schedule.steps() - 1;
    let times: Vec<usize> = (0..steps).map(|i| ((last as f64) * (1.0 - i as f64 / steps as f64)).round() as usize).collect();
    let sigma0 = schedule.sigma(times[0])?;
    let mut x = [gaussian(&shape, &mut rng), gaussian(&shape, &mut rng)].map(|e| e.map(|v| v * (1.0 + sigma0 * sigma0).sqrt() as f32));
    for (i, &t) in times.iter().enumerate() {
        let sigma = schedule.sigma(t)?;
        let sigma_next = match times.get(i + 1) {
            Some(&tn) => schedule.sigma(tn)?,
            None => 0.0,
        };
        let to_z = (1.0 / (1.0 + sigma * sigma).sqrt()) as f32;
        let noisy = LatentPair::new(x[0].map(|v| v * to_z), x[1].map(|v| v * to_z), cfg.patch)?;
        let eps = model.denoise(store, &ModelInputs { noisy: &noisy, t: t as f64, source_latent: &source_latent, signal: Some(signal) })?;
        let ds = (sigma_next - sigma) as f32;
        for (xi, e) in x.iter_mut().zip([&eps.source, &eps.target]) {
            xi.data_mut().iter_mut().zip(e.data()).for_each(|(v, &d)| *v += ds * d);
        }
    }
    let [_, target] = x;
    decode_latent(&target, cfg.patch)
}
