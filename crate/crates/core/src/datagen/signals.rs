//! Editing-signal extractors and per-resolution correspondence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::flow::{FlowDirection, FlowField, TrackSet};
use crate::control::{DragPair, DragPointSet};
use crate::diffusion::Correspondence;
use crate::image::Image;
use crate::{Error, Result};

/// Sobel gradient magnitude of the flow-magnitude field (replicated
/// borders), binarised at `threshold` times its maximum.
pub fn sketch_from_flow(flow: &FlowField, threshold: f32) -> Image {
    let (h, w) = (flow.height, flow.width);
    let mag = flow.magnitude();
    let at = |x: isize, y: isize| mag[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut grad = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)) - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)) - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            grad[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = grad.iter().copied().fold(0.0f32, f32::max);
    let data = if max > 0.0 { grad.iter().map(|&g| if g > threshold * max { 1.0 } else { 0.0 }).collect() } else { vec![0.0; h * w] };
    Image { channels: 1, height: h, width: w, data }
}

/// Draws `k` target pixels without replacement with probability
/// proportional to flow magnitude, pairing each with its tracked source
/// pixel. Pixels whose track is not visible carry no weight.
pub fn sample_drag_points(flow: &FlowField, tracks: &TrackSet, k: usize, seed: u64) -> Result<DragPointSet> {
    if flow.direction != FlowDirection::TargetToSource {
        return Err(Error::Config("drag points are sampled from target-to-source flow".into()));
    }
    if (tracks.height, tracks.width) != (flow.height, flow.width) {
        return Err(Error::Shape("tracks and flow cover different grids".into()));
    }
    if k == 0 {
        return Err(Error::Config("at least one drag point is required".into()));
    }
    let w = flow.width;
    let weights: Vec<f64> = flow.magnitude().iter().enumerate().map(|(i, &m)| if flow.valid[i] && tracks.visible[i] { m as f64 } else { 0.0 }).collect();
    let candidates = weights.iter().filter(|&&v| v > 0.0).count();
    if candidates == 0 {
        return Err(Error::NoMotion);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample_weighted(&mut rng, weights.len(), |i| weights[i], k.min(candidates))
        .map_err(|e| Error::Rejected(format!("weighted sampling failed: {e}")))?;
    let mut pairs = Vec::with_capacity(picks.len());
    for i in picks.iter() {
        let (x, y) = (i % w, i / w);
        if let Some(source) = tracks.matched_pixel(x, y) {
            pairs.push(DragPair { source, target: (x, y) });
        }
    }
    DragPointSet::new(flow.width, flow.height, pairs)
}

/// Forward-warps `source` along source-to-target flow. Each valid source
/// pixel lands on the four bilinear cells around its destination with
/// weight `exp(importance) * kernel`; cells receiving nothing keep the
/// source value.
pub fn softmax_splat(source: &Image, flow: &FlowField, importance: &[f32]) -> Result<Image> {
    if flow.direction != FlowDirection::SourceToTarget {
        return Err(Error::Config("softmax splatting needs source-to-target flow".into()));
    }
    let (h, w) = (source.height, source.width);
    if (flow.height, flow.width) != (h, w) || importance.len() != h * w {
        return Err(Error::Shape(format!("splat of a {h}x{w} image with a {}x{} flow and {} importances", flow.height, flow.width, importance.len())));
    }
    let c = source.channels;
    let top = importance.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut num = vec![0.0f64; c * h * w];
    let mut den = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !flow.valid[i] {
                continue;
            }
            let scale = (importance[i] as f64 - top).exp();
            let (tx, ty) = (x as f64 + flow.dx[i] as f64, y as f64 + flow.dy[i] as f64);
            let (x0, y0) = (tx.floor(), ty.floor());
            let (fx, fy) = (tx - x0, ty - y0);
            for (ox, oy, k) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)] {
                let (cx, cy) = (x0 as isize + ox, y0 as isize + oy);
                if k <= 0.0 || cx < 0 || cy < 0 || cx as usize >= w || cy as usize >= h {
                    continue;
                }
                let j = cy as usize * w + cx as usize;
                let wt = scale * k;
                den[j] += wt;
                for ch in 0..c {
                    num[ch * h * w + j] += wt * source.data[ch * h * w + i] as f64;
                }
            }
        }
    }
    let mut out = source.clone();
    for j in 0..h * w {
        if den[j] > 0.0 {
            for ch in 0..c {
                out.data[ch * h * w + j] = (num[ch * h * w + j] / den[j]) as f32;
            }
        }
    }
    Ok(out)
}

/// Correspondence on a `grid_height x grid_width` token grid with
/// `stride`-pixel cells, from target-to-source tracks queried at each
/// target token's centre pixel.
pub fn build_correspondence(tracks: &TrackSet, grid_height: usize, grid_width: usize, stride: usize) -> Result<Correspondence> {
    if stride == 0 || grid_height * stride > tracks.height || grid_width * stride > tracks.width {
        return Err(Error::Shape(format!("{grid_height}x{grid_width} tokens of stride {stride} do not fit a {}x{} track set", tracks.height, tracks.width)));
    }
    let mut matches = Vec::with_capacity(grid_height * grid_width);
    for r in 0..grid_height {
        for c in 0..grid_width {
            let (x, y) = (c * stride + stride / 2, r * stride + stride / 2);
            let m = tracks.matched_pixel(x, y).and_then(|(px, py)| {
                let (tc, tr) = (px / stride, py / stride);
                (tc < grid_width && tr < grid_height).then_some(tr * grid_width + tc)
            });
            matches.push(m);
        }
    }
    Correspondence::new(grid_height, grid_width, matches)
}
