mod common;

use common::gradsuite::{diffusion_loss_instance, matching_loss_case, matching_loss_through_scores, Outcome};
use common::{randn, rng};
use pairedit::attention::AttentionRecord;
use pairedit::backbone::{encode_image, AttentionMode, BackboneConfig, EditModel, LatentPair, ModelConfig, ModelInputs};
use pairedit::datagen::{EditSignal, SignalKind};
use pairedit::diffusion::{
    add_noise, combined_loss, combined_loss_var, diffusion_loss_value, euler_sample, matching_loss, matching_loss_value, Correspondence, NoiseSchedule,
    DEFAULT_LAMBDA_MATCH, DEFAULT_SAMPLE_STEPS,
};
use pairedit::image::Image;
use pairedit::numerics::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn pair(shape: &[usize], seed: u64) -> LatentPair<f64> {
    let mut r = rng(seed);
    LatentPair::new(randn(&mut r, shape), randn(&mut r, shape), 2).unwrap()
}

#[test]
fn schedule_is_monotone_with_clean_start() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    assert_eq!(s.sigma(0).unwrap(), 0.0);
    for t in 1..1000 {
        assert!(s.alpha_bar(t).unwrap() <= s.alpha_bar(t - 1).unwrap());
        let (a, b) = (s.signal(t).unwrap(), s.noise(t).unwrap());
        assert!((a * a + b * b - 1.0).abs() < 1e-12);
    }
    assert!(s.alpha_bar(1000).is_err());
}

#[test]
fn add_noise_examples() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let z0 = pair(&[3, 2, 2], 1);
    let eps = pair(&[3, 2, 2], 2);
    assert_eq!(add_noise(&s, &z0, 0, &eps).unwrap(), z0);
    let zero = z0.map_frames(|t| Tensor::zeros(t.shape()));
    let a = s.signal(400).unwrap();
    let z = add_noise(&s, &z0, 400, &zero).unwrap();
    for (got, want) in z.source.data().iter().chain(z.target.data()).zip(z0.source.data().iter().chain(z0.target.data())) {
        assert_eq!(*got, a * want);
    }
    assert!(add_noise(&s, &z0, 1000, &eps).is_err());
    let bad = LatentPair::new(Tensor::zeros(&[3, 2, 1]), Tensor::zeros(&[3, 2, 1]), 2).unwrap();
    assert!(add_noise(&s, &z0, 3, &bad).is_err());
}

#[test]
fn noised_variance_matches_schedule() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let z0 = LatentPair::new(Tensor::<f64>::zeros(&[1, 1, 1]), Tensor::zeros(&[1, 1, 1]), 1).unwrap();
    let mut r = rng(3);
    for t in [50usize, 500, 950] {
        let n = 10_000;
        let mut sum_sq = [0.0f64; 2];
        for _ in 0..n {
            let mut draw = || Tensor::new(vec![1, 1, 1], vec![StandardNormal.sample(&mut r)]).unwrap();
            let eps = LatentPair::new(draw(), draw(), 1).unwrap();
            let z = add_noise(&s, &z0, t, &eps).unwrap();
            sum_sq[0] += z.source.data()[0].powi(2);
            sum_sq[1] += z.target.data()[0].powi(2);
        }
        let want = s.noise(t).unwrap().powi(2);
        for v in sum_sq {
            let var = v / n as f64;
            assert!((var - want).abs() <= 0.05 * want, "t={t}: {var} vs {want}");
        }
    }
}

#[test]
fn diffusion_loss_examples() {
    let eps = pair(&[3, 2, 2], 4);
    assert_eq!(diffusion_loss_value(&eps, &eps, true).unwrap(), 0.0);
    let off_source = LatentPair::new(eps.source.map(|v| v + 5.0), eps.target.clone(), 2).unwrap();
    assert_eq!(diffusion_loss_value(&off_source, &eps, false).unwrap(), 0.0);
    assert!(diffusion_loss_value(&off_source, &eps, true).unwrap() > 0.0);
    let plus_one = eps.map_frames(|t| t.map(|v| v + 1.0));
    assert!((diffusion_loss_value(&plus_one, &eps, false).unwrap() - 1.0).abs() < 1e-12);
    // one mean per reconstructed frame
    assert!((diffusion_loss_value(&plus_one, &eps, true).unwrap() - 2.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diffusion_loss_splits_into_frame_terms(seed in 0u64..10_000) {
        let (hat, eps) = (pair(&[2, 3, 2], seed), pair(&[2, 3, 2], seed + 1));
        let mse = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
        let on = diffusion_loss_value(&hat, &eps, true).unwrap();
        let off = diffusion_loss_value(&hat, &eps, false).unwrap();
        prop_assert!((off - mse(&hat.target, &eps.target)).abs() < 1e-12);
        prop_assert!((on - off - mse(&hat.source, &eps.source)).abs() < 1e-12);
    }
}

fn record(n_side: (usize, usize), a: Vec<f64>) -> AttentionRecord<f64> {
    let n = n_side.0 * n_side.1;
    AttentionRecord { layer_id: "l".into(), a_match: Tensor::new(vec![n, n], a).unwrap(), height: n_side.0, width: n_side.1 }
}

#[test]
fn matching_loss_hand_value() {
    let a = vec![0.7311, 0.2689, 0.5, 0.5];
    let c = Correspondence::new(1, 2, vec![Some(0), None]).unwrap();
    let l = matching_loss_value(&[record((1, 2), a)], &[c]).unwrap();
    let want = (0.7311f64 - 1.0).powi(2) + 0.2689f64.powi(2);
    assert!((l - want).abs() < 1e-12);
    assert!((l - 0.1446).abs() < 1e-4);
}

#[test]
fn matching_loss_zero_cases() {
    let c = Correspondence::new(2, 2, vec![Some(2), None, Some(0), Some(3)]).unwrap();
    let mut a = c.dense::<f64>().data().to_vec();
    a[4..8].copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
    assert_eq!(matching_loss_value(&[record((2, 2), a.clone())], std::slice::from_ref(&c)).unwrap(), 0.0);
    let hidden = Correspondence::new(2, 2, vec![None; 4]).unwrap();
    let noise: Vec<f64> = (0..16).map(|i| (i as f64).sin().abs()).collect();
    assert_eq!(matching_loss_value(&[record((2, 2), noise)], &[hidden]).unwrap(), 0.0);
    assert_eq!(matching_loss_value::<f64>(&[], std::slice::from_ref(&c)).unwrap(), 0.0);
    assert!(matching_loss_value(&[record((2, 2), a)], &[Correspondence::identity(1, 4)]).is_err());
}

#[test]
fn matching_loss_matches_dense_oracle() {
    for seed in 0..50 {
        let (rec, c, want) = matching_loss_case(seed);
        let got = matching_loss_value(&[rec], &[c]).unwrap();
        assert!((got - want).abs() < 1e-6, "seed {seed}: {got} vs {want}");
    }
    // layers are averaged
    let (r1, c1, w1) = matching_loss_case(100);
    let (mut r2, c2, w2) = (101..).map(matching_loss_case).find(|(r, _, _)| (r.height, r.width) != (r1.height, r1.width)).unwrap();
    r2.layer_id = "other".into();
    let got = matching_loss_value(&[r1, r2], &[c1, c2]).unwrap();
    assert!((got - (w1 + w2) / 2.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_loss_is_non_negative(seed in 0u64..100_000) {
        let (rec, c, _) = matching_loss_case(seed);
        prop_assert!(matching_loss_value(&[rec], &[c]).unwrap() >= 0.0);
    }
}

#[test]
fn matching_loss_gradient_through_scores() {
    let o = Outcome::over((0..20).map(matching_loss_through_scores));
    assert!(o.pass, "worst rel err {:.2e}", o.worst);
}

#[test]
fn diffusion_loss_gradient() {
    let o = Outcome::over((0..20).map(diffusion_loss_instance));
    assert!(o.pass, "worst rel err {:.2e}", o.worst);
}

#[test]
fn combined_loss_examples() {
    let r = combined_loss(0.5, 0.25, 1.0).unwrap();
    assert!((r.l_total - 0.75).abs() < 1e-12);
    assert_eq!(combined_loss(0.5, 0.25, 0.0).unwrap().l_total, 0.5);
    assert_eq!(DEFAULT_LAMBDA_MATCH, 1.0);
    assert!(combined_loss(f64::NAN, 0.0, 1.0).is_err());
}

proptest! {
    #[test]
    fn combined_total_is_weighted_sum(d in 0.0f64..10.0, m in 0.0f64..10.0, l in 0.0f64..4.0) {
        let r = combined_loss(d, m, l).unwrap();
        prop_assert!((r.l_total - (d + l * m)).abs() < 1e-6);
        prop_assert_eq!((r.l_diff, r.l_match, r.lambda_match), (d, m, l));
    }
}

fn tiny(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
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
        },
        signal: SignalKind::Sketch,
        control_width: 8,
    }
}

fn image(c: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_data(c, 8, 8, (0..c * 64).map(|_| r.random::<f32>()).collect()).unwrap()
}

/// Finite-difference slope of the total loss along one branch parameter
/// entry, with the diffusion term held as a constant.
#[test]
fn matching_gradient_scales_with_lambda() {
    let mut store = ParamStore::<f64>::new();
    let model = EditModel::new(&tiny(AttentionMode::Matching), &mut store, 3).unwrap();
    let src = encode_image::<f64>(&image(3, 1), 2).unwrap();
    let noisy = pair(&[12, 4, 4], 2);
    let corrs = [Correspondence::identity(4, 4), Correspondence::identity(2, 2)];
    let id = store.find("unet.enc1.attn.branch.wq").unwrap();
    let total = |store: &ParamStore<f64>, lambda: f64| {
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &ModelInputs { noisy: &noisy, t: 250.0, source_latent: &src, signal: None }).unwrap();
        let lm = matching_loss(&mut g, &out.denoised.records, &corrs).unwrap();
        let ld = g.input(Tensor::scalar(0.37)).unwrap();
        let l = combined_loss_var(&mut g, ld, lm, lambda).unwrap();
        g.value(l).data()[0]
    };
    let slope = |lambda: f64| {
        let h = 1e-5;
        let mut s = store.clone();
        s.get_mut(id).value.data_mut()[5] += h;
        let up = total(&s, lambda);
        s.get_mut(id).value.data_mut()[5] -= 2.0 * h;
        (up - total(&s, lambda)) / (2.0 * h)
    };
    let base = slope(1.0);
    assert!(base.abs() > 1e-8);
    for lambda in [0.5, 2.0] {
        let ratio = slope(lambda) / base;
        assert!((ratio - lambda).abs() < 1e-5 * lambda, "lambda {lambda}: ratio {ratio}");
    }
}

#[test]
fn sampler_is_deterministic_and_clipped() {
    let (model, store) = EditModel::init(&tiny(AttentionMode::Matching), 0).unwrap();
    let s = NoiseSchedule::cosine(1000).unwrap();
    let src = image(3, 7);
    let sig = EditSignal::Sketch(image(1, 8));
    let a = euler_sample(&model, &store, &s, &src, &sig, DEFAULT_SAMPLE_STEPS, 11).unwrap();
    let b = euler_sample(&model, &store, &s, &src, &sig, DEFAULT_SAMPLE_STEPS, 11).unwrap();
    assert_eq!(a, b);
    assert!(a.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    let c = euler_sample(&model, &store, &s, &src, &sig, DEFAULT_SAMPLE_STEPS, 12).unwrap();
    assert_ne!(a, c);
    let one = euler_sample(&model, &store, &s, &src, &sig, 1, 11).unwrap();
    assert_eq!((one.channels, one.height, one.width), (3, 8, 8));
    assert!(one.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(DEFAULT_SAMPLE_STEPS, 25);
}

#[test]
fn sampler_rejects_bad_requests() {
    let (model, store) = EditModel::init(&tiny(AttentionMode::Matching), 0).unwrap();
    let s = NoiseSchedule::cosine(1000).unwrap();
    let src = image(3, 7);
    let coarse = EditSignal::Coarse(image(3, 8));
    assert!(euler_sample(&model, &store, &s, &src, &coarse, 25, 0).is_err());
    assert!(euler_sample(&model, &store, &s, &src, &EditSignal::Sketch(image(1, 8)), 0, 0).is_err());
}
