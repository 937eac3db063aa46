mod common;

use common::rng;
use pairedit::attention::AttentionRecord;
use pairedit::backbone::{AttentionMode, BackboneConfig, EditModel, ModelConfig};
use pairedit::datagen::{EditSignal, SignalKind};
use pairedit::diffusion::Correspondence;
use pairedit::evalkit::{
    ablation_row, export_attention_heatmap, matching_accuracy, run_ablation, ssim, ssim_with, AblationArm, AblationRow, AblationTable, EvalOptions, SSIM_C1,
    SSIM_C2,
};
use pairedit::formats::save_model;
use pairedit::image::Image;
use pairedit::numerics::Tensor;
use pairedit::train::TrainingSample;
use pairedit::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_data(c, h, w, (0..c * h * w).map(|_| r.random::<f32>()).collect()).unwrap()
}

#[test]
fn ssim_of_constant_images_follows_the_closed_form() {
    let closed = |a: f64, b: f64| (2.0 * a * b + SSIM_C1) * SSIM_C2 / ((a * a + b * b + SSIM_C1) * SSIM_C2);
    let zeros = Image::filled(3, 16, 16, 0.0);
    let ones = Image::filled(3, 16, 16, 1.0);
    let v = ssim(&zeros, &ones).unwrap();
    assert!((v - closed(0.0, 1.0)).abs() < 1e-12);
    assert!((v - 9.999e-5).abs() < 1e-7, "{v}");
    for (a, b) in [(0.25f32, 0.75f32), (0.5, 0.5), (0.1, 0.9)] {
        let v = ssim(&Image::filled(1, 12, 20, a), &Image::filled(1, 12, 20, b)).unwrap();
        assert!((v - closed(a as f64, b as f64)).abs() < 1e-6, "{a} {b}: {v}");
    }
}

#[test]
fn ssim_rejects_bad_shapes() {
    assert!(ssim(&Image::new(3, 16, 16), &Image::new(1, 16, 16)).is_err());
    assert!(ssim(&Image::new(1, 10, 16), &Image::new(1, 10, 16)).is_err());
    assert!(ssim_with(&Image::new(1, 10, 16), &Image::new(1, 10, 16), 5, SSIM_C1, SSIM_C2).is_ok());
}

#[test]
fn ssim_drops_with_noise() {
    let clean = random_image(3, 24, 24, 1);
    let mut r = rng(2);
    let mut prev = 1.0;
    for amp in [0.05f32, 0.2, 0.5] {
        let mut noisy = clean.clone();
        noisy.data.iter_mut().for_each(|v| *v = (*v + amp * (r.random::<f32>() - 0.5)).clamp(0.0, 1.0));
        let s = ssim(&clean, &noisy).unwrap();
        assert!(s < prev, "{amp}: {s}");
        prev = s;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_is_one_on_itself_symmetric_and_bounded(seed in 0u64..100_000, c in prop::sample::select(vec![1usize, 3])) {
        let (a, b) = (random_image(c, 14, 17, seed), random_image(c, 14, 17, seed + 7));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!((-1.0..=1.0).contains(&ab));
        let inverted = Image::from_data(c, 14, 17, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        prop_assert!(ssim(&a, &inverted).unwrap() < 0.0);
    }
}

fn record(rows: Vec<Vec<f32>>, h: usize, w: usize, id: &str) -> AttentionRecord<f32> {
    let n = rows.len();
    AttentionRecord { layer_id: id.into(), a_match: Tensor::new(vec![n, n], rows.concat()).unwrap(), height: h, width: w }
}

fn one_hot(matches: &[Option<usize>], n: usize) -> Vec<Vec<f32>> {
    matches
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut row = vec![0.0; n];
            row[m.unwrap_or(i)] = 1.0;
            row
        })
        .collect()
}

#[test]
fn accuracy_is_one_when_attention_equals_correspondence() {
    let matches = vec![Some(3), None, Some(0), Some(0), Some(1), None, Some(8), Some(2), Some(5)];
    let c = Correspondence::new(3, 3, matches.clone()).unwrap();
    let acc = matching_accuracy(&[record(one_hot(&matches, 9), 3, 3, "a")], &[c]).unwrap();
    assert_eq!((acc.value, acc.visible, acc.correct), (1.0, 7, 7));
}

#[test]
fn accuracy_without_visible_tokens_is_undefined() {
    let c = Correspondence::new(2, 2, vec![None; 4]).unwrap();
    let acc = matching_accuracy(&[record(vec![vec![0.25; 4]; 4], 2, 2, "a")], &[c]).unwrap();
    assert!(acc.value.is_nan());
    assert_eq!((acc.visible, acc.correct), (0, 0));
    assert!(!acc.is_defined());
    let none = matching_accuracy::<f32>(&[], &[]).unwrap();
    assert!(none.value.is_nan());
}

#[test]
fn accuracy_needs_a_correspondence_per_resolution() {
    let c = Correspondence::identity(2, 2);
    assert!(matches!(matching_accuracy(&[record(vec![vec![1.0 / 9.0; 9]; 9], 3, 3, "a")], &[c]), Err(Error::Shape(_))));
}

#[test]
fn uniform_attention_hits_one_in_sixteen() {
    let rec = record(vec![vec![1.0 / 16.0; 16]; 16], 4, 4, "u");
    let mut r = rng(3);
    let draws = 10_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let c = Correspondence::new(4, 4, (0..16).map(|_| Some(r.random_range(0..16))).collect()).unwrap();
        let acc = matching_accuracy(std::slice::from_ref(&rec), &[c]).unwrap();
        assert_eq!(acc.visible, 16);
        total += acc.value;
    }
    let mean = total / draws as f64;
    // per-draw accuracy is Binomial(16, 1/16) / 16
    let p = 1.0 / 16.0;
    let sd = (p * (1.0 - p) / 16.0 / draws as f64).sqrt();
    assert!((mean - p).abs() < 3.0 * sd, "{mean}");
}

#[test]
fn accuracy_averages_layer_rates() {
    // layer a: 2 of 4 correct; layer b: 1 of 1 correct -> mean 0.75, not pooled 3/5
    let ca = Correspondence::new(2, 2, vec![Some(0), Some(1), Some(2), Some(3)]).unwrap();
    let cb = Correspondence::new(1, 1, vec![Some(0)]).unwrap();
    let a = record(one_hot(&[Some(0), Some(1), Some(0), Some(0)], 4), 2, 2, "a");
    let b = record(vec![vec![1.0]], 1, 1, "b");
    let acc = matching_accuracy(&[a, b], &[ca, cb]).unwrap();
    assert_eq!((acc.value, acc.visible, acc.correct), (0.75, 5, 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn accuracy_ignores_record_order(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let mut records = Vec::new();
        let mut corrs = Vec::new();
        for (k, side) in [2usize, 3, 4].into_iter().enumerate() {
            let n = side * side;
            let rows = (0..n).map(|_| (0..n).map(|_| r.random::<f32>()).collect()).collect();
            records.push(record(rows, side, side, &format!("l{k}")));
            corrs.push(Correspondence::new(side, side, (0..n).map(|_| r.random_bool(0.7).then(|| r.random_range(0..n))).collect()).unwrap());
        }
        records.push(records[1].clone());
        let base = matching_accuracy(&records, &corrs).unwrap();
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut r);
        let again = matching_accuracy(&shuffled, &corrs).unwrap();
        prop_assert_eq!((again.visible, again.correct), (base.visible, base.correct));
        prop_assert!((again.value - base.value).abs() < 1e-12 || (again.value.is_nan() && base.value.is_nan()));
        prop_assert!(base.value.is_nan() || (0.0..=1.0).contains(&base.value));
    }
}

#[test]
fn heatmap_examples() {
    let mut rows = vec![vec![0.0f32; 4]; 4];
    rows[2][1] = 1.0;
    rows[0] = vec![0.25; 4];
    let rec = record(rows, 2, 2, "h");
    let hm = export_attention_heatmap(&rec, 2, 8, 8).unwrap();
    assert_eq!((hm.width, hm.height, hm.pixels.len()), (8, 8, 64));
    for y in 0..8 {
        for x in 0..8 {
            let bright = y < 4 && x >= 4;
            assert_eq!(hm.pixels[y * 8 + x], if bright { 255 } else { 0 }, "({x}, {y})");
        }
    }
    let flat = export_attention_heatmap(&rec, 0, 8, 8).unwrap();
    assert!(flat.pixels.iter().all(|&p| p == 0));
    assert_eq!(export_attention_heatmap(&rec, 2, 8, 8).unwrap(), hm);
    assert!(matches!(export_attention_heatmap(&rec, 4, 8, 8), Err(Error::OutOfBounds(_))));
    assert!(export_attention_heatmap(&rec, 1, 1, 8).is_err());
}

#[test]
fn heatmap_scales_min_to_black_and_max_to_white() {
    let rec = record(vec![vec![0.1, 0.2, 0.3, 0.4]; 4], 2, 2, "h");
    let hm = export_attention_heatmap(&rec, 3, 2, 2).unwrap();
    assert_eq!(hm.pixels, vec![0, 85, 170, 255]);
}

fn run(arm: &str, seed: Option<u64>, s: f64, m: f64) -> AblationRow {
    AblationRow { arm: arm.parse().unwrap(), seed, mean_ssim: s, matching: m }
}

#[test]
fn ablation_table_structure_and_round_trip() {
    let arms = ["temporal/recon_on", "crossframe/recon_on", "matching/recon_on", "temporal/recon_off", "crossframe/recon_off", "matching/recon_off"];
    let mut runs = Vec::new();
    for (k, arm) in arms.iter().enumerate() {
        for seed in 0..3 {
            let m = if arm.starts_with("matching") { 0.5 + seed as f64 / 10.0 } else { f64::NAN };
            runs.push(run(arm, Some(seed), 0.1 * k as f64 + seed as f64 / 100.0, m));
        }
    }
    let table = AblationTable::from_runs(&runs);
    assert_eq!(table.rows.len(), arms.len() * 3 + arms.len());
    let mean = table.mean("matching/recon_on".parse().unwrap()).unwrap();
    assert!((mean.mean_ssim - 0.21).abs() < 1e-12);
    assert!((mean.matching - 0.6).abs() < 1e-12);
    assert!(table.mean("temporal/recon_off".parse().unwrap()).unwrap().matching.is_nan());
    assert_eq!(AblationTable::from_tsv(&table.to_tsv()).unwrap(), table);
    assert_eq!(table.to_text().lines().count(), table.rows.len() + 1);
    assert!(AblationTable::from_tsv("nope\n").is_err());
    let mut bad = table.to_tsv();
    bad.push_str("matching/recon_on\t0\tx\t1\n");
    assert!(AblationTable::from_tsv(&bad).is_err());
}

#[test]
fn arm_names_round_trip() {
    for mode in AttentionMode::ALL {
        for recon in [true, false] {
            let arm = AblationArm::new(mode, recon);
            assert_eq!(arm.to_string().parse::<AblationArm>().unwrap(), arm);
        }
    }
    assert_eq!(AblationArm::new(AttentionMode::CrossFrame, false).checkpoint_name(2), "crossframe_norecon_seed2.fpck");
    assert!("matching/maybe".parse::<AblationArm>().is_err());
}

fn tiny_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_height: 16,
            image_width: 16,
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

fn tiny_samples() -> Vec<TrainingSample> {
    (0..2)
        .map(|i| {
            let corrs = vec![Correspondence::identity(8, 8), Correspondence::identity(4, 4)];
            let sketch = EditSignal::Sketch(Image::new(1, 16, 16));
            TrainingSample::new(random_image(3, 16, 16, i), random_image(3, 16, 16, i + 10), sketch, corrs, 2).unwrap()
        })
        .collect()
}

fn quick() -> EvalOptions {
    EvalOptions { sample_steps: 2, match_timesteps: vec![300], ..EvalOptions::default() }
}

#[test]
fn run_ablation_reads_checkpoints_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let arms: Vec<AblationArm> = AttentionMode::ALL.into_iter().flat_map(|m| [AblationArm::new(m, true), AblationArm::new(m, false)]).collect();
    let seeds = [0u64, 1];
    for arm in &arms {
        for &seed in &seeds {
            let cfg = tiny_config(arm.mode);
            let (_, store) = EditModel::init(&cfg, seed + 100 * arm.recon as u64).unwrap();
            save_model(&dir.path().join(arm.checkpoint_name(seed)), &cfg, &store).unwrap();
        }
    }
    let samples = tiny_samples();
    let table = run_ablation(dir.path(), &samples, &arms, &seeds, &quick()).unwrap();
    assert_eq!(table.rows.len(), arms.len() * seeds.len() + arms.len());
    for r in &table.rows {
        assert!((-1.0..=1.0).contains(&r.mean_ssim));
        assert_eq!(r.matching.is_nan(), r.arm.mode != AttentionMode::Matching, "{}", r.arm);
    }
    assert_eq!(run_ablation(dir.path(), &samples, &arms, &seeds, &quick()).unwrap(), table);

    let err = run_ablation(dir.path(), &samples, &arms[..1], &[7], &quick()).unwrap_err().to_string();
    assert!(err.contains("seed 7") && err.contains(&arms[0].to_string()), "{err}");

    let (model, store) = EditModel::init(&tiny_config(AttentionMode::Temporal), 0).unwrap();
    assert!(ablation_row(AblationArm::new(AttentionMode::Matching, true), 0, &model, &store, &samples, &quick()).is_err());
}
