//! Gradient checks shared by the module tests and the acceptance suite.
//! Each returns whether every checked entry passed and the worst relative
//! error seen.

use pairedit::attention::{ops, AttentionRecord, AttentionWeights};
use pairedit::backbone::{encode_image, AttentionMode, BackboneConfig, EditModel, LatentPair, ModelConfig, ModelInputs, RecordVar};
use pairedit::datagen::{EditSignal, SignalKind};
use pairedit::diffusion::{diffusion_loss, matching_loss, Correspondence};
use pairedit::image::Image;
use pairedit::numerics::{grad_check, GradCheckOptions, GradReport, Graph, ParamStore, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;

use super::{project, randn, rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    pub worst: f64,
}

impl Outcome {
    pub fn of(reports: &[GradReport]) -> Self {
        Self { pass: !reports.is_empty() && reports.iter().all(|r| r.pass), worst: reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max) }
    }

    pub fn merge(self, o: Self) -> Self {
        Self { pass: self.pass && o.pass, worst: self.worst.max(o.worst) }
    }

    pub fn over(instances: impl Iterator<Item = Self>) -> Self {
        instances.fold(Self { pass: true, worst: 0.0 }, Self::merge)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Variant {
    Spatial,
    Temporal,
    CrossFrame,
    Matching,
    MatchingMap,
    Fused,
}

pub const VARIANTS: [Variant; 6] = [Variant::Spatial, Variant::Temporal, Variant::CrossFrame, Variant::Matching, Variant::MatchingMap, Variant::Fused];

fn build(variant: Variant, g: &mut Graph<f64>, s: &ParamStore<f64>, aw: &AttentionWeights, xs: Var, xt: Var) -> pairedit::Result<Var> {
    Ok(match variant {
        Variant::Spatial => ops::spatial(g, s, aw, xt)?,
        Variant::Temporal => {
            let (a, b) = ops::temporal(g, s, aw, xs, xt)?;
            g.concat0(&[a, b])?
        }
        Variant::CrossFrame => ops::cross_frame(g, s, aw, xt, xs)?,
        Variant::Matching => ops::matching(g, s, aw, xt, xs)?.0,
        Variant::MatchingMap => ops::matching(g, s, aw, xt, xs)?.1,
        Variant::Fused => {
            let (ps, pt) = (ops::spatial(g, s, aw, xs)?, ops::spatial(g, s, aw, xt)?);
            let m = ops::matching(g, s, aw, xt, xs)?.0;
            let (a, b) = ops::fuse(g, (ps, pt), m)?;
            g.concat0(&[a, b])?
        }
    })
}

/// Random heads, widths and grid; weights and both token frames are
/// parameters, so the check covers every input.
pub fn attention_variant(variant: Variant, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let heads = [1usize, 2][r.random_range(0..2)];
    let d = heads * r.random_range(1..=3);
    let (h, w) = (r.random_range(1..=3), r.random_range(1..=3));
    let mut store = ParamStore::<f64>::new();
    let aw = AttentionWeights::new(&mut store, "att", d, heads, &mut r).unwrap();
    let src = store.add("src", randn(&mut r, &[h * w, d])).unwrap();
    let tgt = store.add("tgt", randn(&mut r, &[h * w, d])).unwrap();
    let reports = grad_check(
        &mut store,
        |g, s| {
            let (xs, xt) = (g.param(s, src), g.param(s, tgt));
            let out = build(variant, g, s, &aw, xs, xt).expect("attention op");
            project(g, out, seed)
        },
        &GradCheckOptions::with_tolerance(1e-5),
    )
    .unwrap();
    Outcome::of(&reports)
}

/// Matching loss through a softmax over free 3x3-grid scores.
pub fn matching_loss_through_scores(seed: u64) -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let scores = store.add("scores", randn(&mut rng(seed), &[9, 9])).unwrap();
    let mut r = rng(seed + 500);
    let c = Correspondence::new(3, 3, (0..9).map(|_| r.random_bool(0.6).then(|| r.random_range(0..9))).collect()).unwrap();
    let reports = grad_check(
        &mut store,
        |g, s| {
            let x = g.param(s, scores);
            let map = g.softmax(x)?;
            let rec = RecordVar { layer_id: "l".into(), map, height: 3, width: 3 };
            Ok(matching_loss(g, &[rec], std::slice::from_ref(&c)).expect("loss"))
        },
        &GradCheckOptions::with_tolerance(1e-5),
    )
    .unwrap();
    Outcome::of(&reports)
}

pub fn diffusion_loss_instance(seed: u64) -> Outcome {
    let recon = seed.is_multiple_of(2);
    let mut r = rng(seed + 900);
    let eps = LatentPair::new(randn(&mut r, &[2, 2, 3]), randn(&mut r, &[2, 2, 3]), 1).unwrap();
    let mut store = ParamStore::<f64>::new();
    let s = store.add("hat_s", randn(&mut rng(seed), &[2, 2, 3])).unwrap();
    let t = store.add("hat_t", randn(&mut rng(seed + 1), &[2, 2, 3])).unwrap();
    let reports = grad_check(
        &mut store,
        |g, st| {
            let (a, b) = (g.param(st, s), g.param(st, t));
            Ok(diffusion_loss(g, (a, b), &eps, recon).expect("loss"))
        },
        &GradCheckOptions::with_tolerance(1e-5),
    )
    .unwrap();
    Outcome::of(&reports)
}

/// Matching loss oracle case: a random row-stochastic map on a grid of at
/// most 4x4, a random correspondence, and the masked squared error summed
/// densely over every (i, j) and divided by the visible-row count.
pub fn matching_loss_case(seed: u64) -> (AttentionRecord<f64>, Correspondence, f64) {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
    let n = h * w;
    let mut a = vec![0.0; n * n];
    for row in a.chunks_mut(n) {
        let e: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 3.0).map(f64::exp).collect();
        let z: f64 = e.iter().sum();
        row.iter_mut().zip(&e).for_each(|(v, x)| *v = x / z);
    }
    let matches: Vec<Option<usize>> = (0..n).map(|_| r.random_bool(0.7).then(|| r.random_range(0..n))).collect();
    let mut err = 0.0;
    let mut visible = 0;
    for i in 0..n {
        if let Some(j0) = matches[i] {
            visible += 1;
            for j in 0..n {
                let c = if j == j0 { 1.0 } else { 0.0 };
                err += (a[i * n + j] - c).powi(2);
            }
        }
    }
    let want = err / visible.max(1) as f64;
    let rec = AttentionRecord { layer_id: "l".into(), a_match: Tensor::new(vec![n, n], a).unwrap(), height: h, width: w };
    (rec, Correspondence::new(h, w, matches).unwrap(), want)
}

pub fn small_backbone(mode: AttentionMode) -> BackboneConfig {
    BackboneConfig {
        image_height: 8,
        image_width: 8,
        patch: 2,
        base_channels: 8,
        multipliers: vec![1, 2],
        attention_levels: vec![0, 1],
        heads: 2,
        embed_dim: 8,
        attention_mode: mode,
        norm_groups: 4,
    }
}

pub fn small_model(mode: AttentionMode, seed: u64) -> (EditModel, ParamStore<f64>) {
    let cfg = ModelConfig { backbone: small_backbone(mode), signal: SignalKind::Sketch, control_width: 8 };
    let mut store = ParamStore::new();
    let model = EditModel::new(&cfg, &mut store, seed).unwrap();
    (model, store)
}

pub fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_data(c, h, w, (0..c * h * w).map(|_| r.random::<f32>()).collect()).unwrap()
}

/// Full denoise pass of a small model (mode cycles with the seed) at a
/// random timestep, control scales set non-zero so the encoder is on the
/// path. Parameters whose gradient is structurally zero (biases straight
/// into a group norm) must come out exactly zero; a sample of the rest is
/// checked against finite differences. The step is 1e-5: some embedding
/// entries have enough curvature that the O(h^2) truncation error of a
/// 1e-4 central difference alone reaches 1e-4.
pub fn denoise_instance(seed: u64) -> Outcome {
    let mode = AttentionMode::ALL[seed as usize % 3];
    let (model, mut store) = small_model(mode, seed);
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).name.starts_with("control.scale") {
            store.get_mut(id).value = Tensor::new(vec![1], vec![0.7]).unwrap();
        }
    }
    let mut r = rng(seed + 77);
    let noisy = LatentPair::new(randn(&mut r, &[12, 4, 4]), randn(&mut r, &[12, 4, 4]), 2).unwrap();
    let source = encode_image::<f64>(&random_image(3, 8, 8, seed + 1), 2).unwrap();
    let signal = EditSignal::Sketch(random_image(1, 8, 8, seed + 2));
    let t = r.random_range(1.0..999.0);
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> pairedit::numerics::Result<Var> {
        let out = model.forward(g, s, &ModelInputs { noisy: &noisy, t, source_latent: &source, signal: Some(&signal) }).expect("forward");
        let both = g.concat0(&[out.denoised.eps_source, out.denoised.eps_target])?;
        project(g, both, seed)
    };
    let mut g = Graph::new();
    let l = loss(&mut g, &store).unwrap();
    g.backward(l).unwrap();
    let (live, dead): (Vec<_>, Vec<_>) = g.param_grads().into_iter().partition(|(_, gr)| gr.data().iter().any(|v| v.abs() > 1e-9));
    let dead_ok = dead.iter().all(|(_, gr)| gr.data().iter().all(|v| v.abs() < 1e-12));
    let chosen: Vec<_> = sample(&mut r, live.len(), 8).into_iter().map(|i| live[i].0).collect();
    let opts = GradCheckOptions { only: Some(chosen), max_entries: Some(12), step: 1e-5, ..GradCheckOptions::with_tolerance(1e-4) };
    let reports = grad_check(&mut store, loss, &opts).unwrap();
    let o = Outcome::of(&reports);
    Outcome { pass: o.pass && dead_ok && reports.len() == 8, ..o }
}
