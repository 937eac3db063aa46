use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::unet::{DenoiseOutput, Denoiser};
use super::{BackboneConfig, ImageEmbedder, LatentPair};
use crate::control::{ControlEncoder, LevelControl};
use crate::datagen::{EditSignal, SignalKind};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub signal: SignalKind,
    /// Channel width of the control encoder.
    pub control_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackboneConfig::default(), signal: SignalKind::Sketch, control_width: 16 }
    }
}

/// Embedder, control encoder (raster signals only) and denoiser, with all
/// parameters in one store.
pub struct EditModel {
    config: ModelConfig,
    embedder: ImageEmbedder,
    control: Option<ControlEncoder>,
    denoiser: Denoiser,
}

pub struct ModelInputs<'a, T: Scalar> {
    pub noisy: &'a LatentPair<T>,
    /// Diffusion step, in `[0, T)`.
    pub t: f64,
    pub source_latent: &'a Tensor<T>,
    /// `None` runs the model without any editing signal.
    pub signal: Option<&'a EditSignal>,
}

pub struct ModelOutput {
    pub denoised: DenoiseOutput,
    pub control: Vec<LevelControl>,
    pub embedding: Var,
}

impl EditModel {
    /// Registers every parameter in `store` in a fixed order; the same
    /// `(config, seed)` always yields the same values.
    pub fn new<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedder = ImageEmbedder::new(store, &config.backbone, &mut rng)?;
        let control = match config.signal.raster_channels() {
            Some(c) => Some(ControlEncoder::new(store, &config.backbone, c, config.control_width, &mut rng)?),
            None => None,
        };
        let denoiser = Denoiser::new(store, &config.backbone, &mut rng)?;
        Ok(Self { config: config.clone(), embedder, control, denoiser })
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.config.backbone
    }

    pub fn embedder(&self) -> &ImageEmbedder {
        &self.embedder
    }

    pub fn control_encoder(&self) -> Option<&ControlEncoder> {
        self.control.as_ref()
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inputs: &ModelInputs<'_, T>) -> Result<ModelOutput> {
        if let Some(s) = inputs.signal {
            if s.kind() != self.config.signal {
                return Err(Error::Config(format!("model trained for {} signals was given a {} signal", self.config.signal, s.kind())));
            }
        }
        let zs = g.input(inputs.noisy.source.clone())?;
        let zt = g.input(inputs.noisy.target.clone())?;
        let src = g.input(inputs.source_latent.clone())?;
        let embedding = self.embedder.forward(g, store, src)?;
        let control = match (inputs.signal.and_then(EditSignal::raster), &self.control) {
            (Some(raster), Some(enc)) => enc.encode_signal(g, store, raster)?,
            _ => Vec::new(),
        };
        let drag = inputs.signal.and_then(EditSignal::drag_points);
        let ctrl = (!control.is_empty()).then_some(control.as_slice());
        let denoised = self.denoiser.forward(g, store, (zs, zt), inputs.t, src, embedding, ctrl, drag)?;
        Ok(ModelOutput { denoised, control, embedding })
    }

    /// Noise prediction for both frames as plain tensors.
    pub fn denoise<T: Scalar>(&self, store: &ParamStore<T>, inputs: &ModelInputs<'_, T>) -> Result<LatentPair<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, inputs)?;
        LatentPair::new(g.value(out.denoised.eps_source).clone(), g.value(out.denoised.eps_target).clone(), self.config.backbone.patch)
    }
}
