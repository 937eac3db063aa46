//! Training-pair construction from synthetic videos: pair sampling with
//! flow-magnitude filters, sketch / drag / coarse-edit signal extraction,
//! and per-resolution token correspondences.

mod flow;
mod scene;
mod signals;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use flow::{estimate_flow_block_matching, FlowDirection, FlowField, TrackSet};
pub use scene::{render_scene, Affine, Frame, RenderedPair, SceneConfig, SceneObject, Shape, SyntheticScene, Texture};
pub use signals::{build_correspondence, sample_drag_points, sketch_from_flow, softmax_splat};

use crate::control::DragPointSet;
use crate::diffusion::Correspondence;
use crate::image::Image;
use crate::{Error, Result};

pub(crate) use scene::splitmix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SignalKind {
    Sketch,
    Drag,
    Coarse,
}

impl SignalKind {
    pub const ALL: [SignalKind; 3] = [SignalKind::Sketch, SignalKind::Drag, SignalKind::Coarse];

    pub fn as_str(self) -> &'static str {
        match self {
            SignalKind::Sketch => "sketch",
            SignalKind::Drag => "drag",
            SignalKind::Coarse => "coarse",
        }
    }

    /// Channels of the raster handed to the control encoder, if any.
    pub fn raster_channels(self) -> Option<usize> {
        match self {
            SignalKind::Sketch => Some(1),
            SignalKind::Coarse => Some(3),
            SignalKind::Drag => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            SignalKind::Sketch => 0,
            SignalKind::Drag => 1,
            SignalKind::Coarse => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| Error::Config(format!("unknown signal type {s:?} (expected sketch, drag or coarse)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EditSignal {
    Sketch(Image),
    Drag(DragPointSet),
    Coarse(Image),
}

impl EditSignal {
    pub fn kind(&self) -> SignalKind {
        match self {
            EditSignal::Sketch(_) => SignalKind::Sketch,
            EditSignal::Drag(_) => SignalKind::Drag,
            EditSignal::Coarse(_) => SignalKind::Coarse,
        }
    }

    pub fn raster(&self) -> Option<&Image> {
        match self {
            EditSignal::Sketch(img) | EditSignal::Coarse(img) => Some(img),
            EditSignal::Drag(_) => None,
        }
    }

    pub fn drag_points(&self) -> Option<&DragPointSet> {
        match self {
            EditSignal::Drag(d) => Some(d),
            _ => None,
        }
    }

    /// The signal that asks for no change to `source`.
    pub fn identity(kind: SignalKind, source: &Image) -> Self {
        match kind {
            SignalKind::Sketch => EditSignal::Sketch(Image::new(1, source.height, source.width)),
            SignalKind::Drag => EditSignal::Drag(DragPointSet::empty(source.width, source.height)),
            SignalKind::Coarse => EditSignal::Coarse(source.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub min_interval: usize,
    pub tau_lo: f32,
    pub tau_hi: f32,
    pub sketch_threshold: f32,
    pub max_drag_points: usize,
    /// Pixel stride of every token grid that needs a correspondence.
    pub token_strides: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        Self { min_interval: 5, tau_lo: 2.0, tau_hi: scene.width as f32 / 4.0, sketch_threshold: 0.5, max_drag_points: 4, token_strides: vec![8, 16], scene }
    }
}

impl DataConfig {
    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.scene.height = height;
        self.scene.width = width;
        self.tau_hi = width as f32 / 4.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.scene.height, self.scene.width);
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("image size {h}x{w} is too small")));
        }
        if self.scene.frame_count <= self.min_interval + 1 {
            return Err(Error::Config(format!("{} frames leave no pair with an interval above {}", self.scene.frame_count, self.min_interval)));
        }
        if !(self.tau_lo >= 0.0 && self.tau_lo <= self.tau_hi) {
            return Err(Error::Config(format!("flow bounds [{}, {}] are not ordered", self.tau_lo, self.tau_hi)));
        }
        for &s in &self.token_strides {
            if s == 0 || h % s != 0 || w % s != 0 {
                return Err(Error::Config(format!("token stride {s} does not divide {h}x{w}")));
            }
        }
        if self.max_drag_points == 0 {
            return Err(Error::Config("max_drag_points must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PairDecision {
    Accepted { src_idx: usize, tgt_idx: usize, mean_flow: f32 },
    Rejected(PairRejection),
}

#[derive(Clone, Debug, PartialEq)]
pub enum PairRejection {
    IntervalTooShort { interval: usize },
    TooLittleMotion { mean_flow: f32 },
    TooMuchMotion { mean_flow: f32 },
}

/// Flow filter between frames: the interval must exceed `min_interval` and
/// the mean magnitude over pixels moving more than half a pixel must lie in
/// `[tau_lo, tau_hi]`.
pub fn sample_pair(src_idx: usize, tgt_idx: usize, flow_t2s: &FlowField, tau_lo: f32, tau_hi: f32, min_interval: usize) -> PairDecision {
    let interval = src_idx.abs_diff(tgt_idx);
    if interval <= min_interval {
        return PairDecision::Rejected(PairRejection::IntervalTooShort { interval });
    }
    let mean_flow = flow_t2s.mean_moving_magnitude(0.5);
    if mean_flow < tau_lo {
        PairDecision::Rejected(PairRejection::TooLittleMotion { mean_flow })
    } else if mean_flow > tau_hi {
        PairDecision::Rejected(PairRejection::TooMuchMotion { mean_flow })
    } else {
        PairDecision::Accepted { src_idx, tgt_idx, mean_flow }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMeta {
    pub index: usize,
    pub scene_seed: u64,
    pub src_idx: usize,
    pub tgt_idx: usize,
    pub mean_flow: f32,
}

#[derive(Clone, Debug)]
pub struct SamplePair {
    pub source: Image,
    pub target: Image,
    pub signal: EditSignal,
    pub correspondences: Vec<Correspondence>,
    pub flow_t2s: FlowField,
    pub flow_s2t: FlowField,
    pub tracks_t2s: TrackSet,
    pub tracks_s2t: TrackSet,
    pub meta: PairMeta,
}

/// Images, flows and correspondences of one accepted pair, before any
/// signal is extracted.
#[derive(Clone, Debug)]
pub struct PairCore {
    pub rendered: RenderedPair,
    pub correspondences: Vec<Correspondence>,
    pub meta: PairMeta,
}

fn stream_seed(seed: u64, index: usize, stream: u64) -> u64 {
    splitmix64(splitmix64(seed ^ 0x5EED_0000_0000) ^ splitmix64(index as u64) ^ stream.rotate_left(32))
}

const MAX_SCENES: usize = 256;
const PAIR_DRAWS_PER_SCENE: usize = 16;

/// Draws scenes until a frame pair passes the filter. Pure in `(config, seed, index)`.
pub fn generate_core(config: &DataConfig, seed: u64, index: usize) -> Result<PairCore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, index, 0));
    let frames = config.scene.frame_count;
    for _ in 0..MAX_SCENES {
        let scene_seed: u64 = rng.random();
        let scene = SyntheticScene::random(&config.scene, scene_seed, &mut rng)?;
        for _ in 0..PAIR_DRAWS_PER_SCENE {
            let src_idx = rng.random_range(0..frames);
            let tgt_idx = rng.random_range(0..frames);
            if src_idx.abs_diff(tgt_idx) <= config.min_interval {
                continue;
            }
            let (flow_t2s, _) = scene.flow_between(tgt_idx, src_idx, FlowDirection::TargetToSource)?;
            if let PairDecision::Accepted { mean_flow, .. } = sample_pair(src_idx, tgt_idx, &flow_t2s, config.tau_lo, config.tau_hi, config.min_interval) {
                let rendered = render_scene(&scene, src_idx, tgt_idx)?;
                let correspondences = correspondences_for(&rendered.tracks_t2s, &config.token_strides)?;
                let meta = PairMeta { index, scene_seed, src_idx, tgt_idx, mean_flow };
                return Ok(PairCore { rendered, correspondences, meta });
            }
        }
    }
    Err(Error::Rejected(format!("no scene produced an acceptable pair for index {index}")))
}

pub fn correspondences_for(tracks_t2s: &TrackSet, strides: &[usize]) -> Result<Vec<Correspondence>> {
    strides.iter().map(|&s| build_correspondence(tracks_t2s, tracks_t2s.height / s, tracks_t2s.width / s, s)).collect()
}

pub fn extract_signal(config: &DataConfig, core: &PairCore, kind: SignalKind, seed: u64) -> Result<EditSignal> {
    let r = &core.rendered;
    Ok(match kind {
        SignalKind::Sketch => EditSignal::Sketch(sketch_from_flow(&r.flow_t2s, config.sketch_threshold)),
        SignalKind::Coarse => {
            let importance = vec![0.0; r.source.image.height * r.source.image.width];
            EditSignal::Coarse(softmax_splat(&r.source.image, &r.flow_s2t, &importance)?)
        }
        SignalKind::Drag => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(1..=config.max_drag_points);
            EditSignal::Drag(sample_drag_points(&r.flow_t2s, &r.tracks_t2s, k, rng.random())?)
        }
    })
}

/// The `index`-th training pair for `seed`, carrying a `kind` signal. The
/// images and correspondences do not depend on `kind`.
pub fn generate_pair(config: &DataConfig, seed: u64, index: usize, kind: SignalKind) -> Result<SamplePair> {
    let core = generate_core(config, seed, index)?;
    let signal = extract_signal(config, &core, kind, stream_seed(seed, index, 1 + kind.code() as u64))?;
    let PairCore { rendered, correspondences, meta } = core;
    Ok(SamplePair {
        source: rendered.source.image,
        target: rendered.target.image,
        signal,
        correspondences,
        flow_t2s: rendered.flow_t2s,
        flow_s2t: rendered.flow_s2t,
        tracks_t2s: rendered.tracks_t2s,
        tracks_s2t: rendered.tracks_s2t,
        meta,
    })
}
