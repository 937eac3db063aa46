//! Synthetic static-camera videos: textured objects moving along affine
//! trajectories over a textured background, with exact flow and tracks.

use rand::Rng;

use super::flow::{FlowDirection, FlowField, TrackSet};
use crate::image::Image;
use crate::{Error, Result};

/// `p = M·u + t`, with `M = [[a, b], [c, d]]` stored row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [f64; 4],
    pub t: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine { m: [1.0, 0.0, 0.0, 1.0], t: [0.0, 0.0] };

    pub fn translation(dx: f64, dy: f64) -> Self {
        Affine { m: [1.0, 0.0, 0.0, 1.0], t: [dx, dy] }
    }

    /// Scale, then rotate by `angle` (radians), then translate to `center`.
    pub fn similarity(center: [f64; 2], angle: f64, scale: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Affine { m: [scale * c, -scale * s, scale * s, scale * c], t: center }
    }

    pub fn det(&self) -> f64 {
        self.m[0] * self.m[3] - self.m[1] * self.m[2]
    }

    #[inline]
    pub fn apply(&self, u: [f64; 2]) -> [f64; 2] {
        [self.m[0] * u[0] + self.m[1] * u[1] + self.t[0], self.m[2] * u[0] + self.m[3] * u[1] + self.t[1]]
    }

    pub fn inverse(&self) -> Option<Affine> {
        let det = self.det();
        if !det.is_finite() || det.abs() < 1e-9 {
            return None;
        }
        let [a, b, c, d] = self.m;
        let m = [d / det, -b / det, -c / det, a / det];
        let t = [-(m[0] * self.t[0] + m[1] * self.t[1]), -(m[2] * self.t[0] + m[3] * self.t[1])];
        Some(Affine { m, t })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Axis-aligned in local coordinates: `-hw <= u.x < hw`, `-hh <= u.y < hh`.
    Rect {
        half_width: f64,
        half_height: f64,
    },
    Disk {
        radius: f64,
    },
    Triangle {
        vertices: [[f64; 2]; 3],
    },
}

impl Shape {
    pub fn contains(&self, u: [f64; 2]) -> bool {
        match *self {
            Shape::Rect { half_width, half_height } => u[0] >= -half_width && u[0] < half_width && u[1] >= -half_height && u[1] < half_height,
            Shape::Disk { radius } => u[0] * u[0] + u[1] * u[1] < radius * radius,
            Shape::Triangle { vertices: [a, b, c] } => {
                let side = |p: [f64; 2], q: [f64; 2]| (q[0] - p[0]) * (u[1] - p[1]) - (q[1] - p[1]) * (u[0] - p[0]);
                let (d1, d2, d3) = (side(a, b), side(b, c), side(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

/// Two-octave value noise around a base colour, evaluated in continuous
/// coordinates so any warp of it can be rendered exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub seed: u64,
    pub cell: f64,
    pub base: [f32; 3],
    pub amplitude: f32,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, channel: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64((ix as u64).wrapping_mul(0x1F1F_1F1F) ^ splitmix64((iy as u64) ^ (channel << 40))));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn value_noise(seed: u64, cell: f64, u: [f64; 2], channel: u64) -> f64 {
    let (x, y) = (u[0] / cell, u[1] / cell);
    let (x0, y0) = (x.floor(), y.floor());
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (fx, fy) = (smooth(x - x0), smooth(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = lattice(seed, ix, iy, channel);
    let v10 = lattice(seed, ix + 1, iy, channel);
    let v01 = lattice(seed, ix, iy + 1, channel);
    let v11 = lattice(seed, ix + 1, iy + 1, channel);
    let top = v00 + (v10 - v00) * fx;
    let bottom = v01 + (v11 - v01) * fx;
    top + (bottom - top) * fy
}

impl Texture {
    pub fn sample(&self, u: [f64; 2]) -> [f32; 3] {
        let mut out = [0.0f32; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let c64 = c as u64;
            let n = value_noise(self.seed, self.cell, u, c64) + 0.5 * value_noise(self.seed ^ 0xA5A5, self.cell * 0.5, u, c64);
            *o = (self.base[c] + self.amplitude * n as f32).clamp(0.0, 1.0);
        }
        out
    }

    pub fn random(rng: &mut impl Rng, cell: f64, base_range: (f32, f32), amplitude: f32) -> Self {
        Texture { seed: rng.random(), cell, base: std::array::from_fn(|_| rng.random_range(base_range.0..base_range.1)), amplitude }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub texture: Texture,
    /// Local-to-canvas transform for every frame.
    pub trajectory: Vec<Affine>,
}

/// Objects are painted in list order, so later objects occlude earlier ones.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub background: Texture,
    pub objects: Vec<SceneObject>,
    pub frame_count: usize,
    pub seed: u64,
    inverses: Vec<Vec<Affine>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Half-extent range of objects, in pixels.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Speed range in pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    pub max_spin: f64,
    pub max_growth: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frame_count: 16,
            min_objects: 1,
            max_objects: 3,
            min_extent: 6.0,
            max_extent: 12.0,
            min_speed: 0.3,
            max_speed: 1.0,
            max_spin: 0.004,
            max_growth: 0.004,
        }
    }
}

/// One rendered frame plus the per-pixel index of the visible object.
#[derive(Clone, Debug)]
pub struct Frame {
    pub image: Image,
    pub owner: Vec<Option<usize>>,
}

impl SyntheticScene {
    pub fn new(width: usize, height: usize, background: Texture, objects: Vec<SceneObject>, frame_count: usize, seed: u64) -> Result<Self> {
        if width == 0 || height == 0 || frame_count == 0 {
            return Err(Error::Config("scene needs positive dims and at least one frame".into()));
        }
        let mut inverses = Vec::with_capacity(objects.len());
        for (k, o) in objects.iter().enumerate() {
            if o.trajectory.len() != frame_count {
                return Err(Error::Config(format!("object {k} has {} transforms for {frame_count} frames", o.trajectory.len())));
            }
            let inv = o
                .trajectory
                .iter()
                .enumerate()
                .map(|(f, a)| a.inverse().ok_or_else(|| Error::Config(format!("object {k} frame {f}: degenerate transform"))))
                .collect::<Result<Vec<_>>>()?;
            inverses.push(inv);
        }
        Ok(Self { width, height, background, objects, frame_count, seed, inverses })
    }

    pub fn random(config: &SceneConfig, seed: u64, rng: &mut impl Rng) -> Result<Self> {
        let (w, h) = (config.width as f64, config.height as f64);
        let background = Texture::random(rng, 6.0, (0.3, 0.7), 0.25);
        let count = rng.random_range(config.min_objects..=config.max_objects);
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let extent = rng.random_range(config.min_extent..=config.max_extent);
            let shape = match rng.random_range(0..3) {
                0 => Shape::Rect { half_width: extent, half_height: extent * rng.random_range(0.6..=1.0) },
                1 => Shape::Disk { radius: extent },
                _ => {
                    let a0 = rng.random_range(0.0..std::f64::consts::TAU);
                    let vertices = std::array::from_fn(|i| {
                        let a = a0 + i as f64 * std::f64::consts::TAU / 3.0 + rng.random_range(-0.3..0.3);
                        let r = extent * rng.random_range(1.0..1.3);
                        [r * a.cos(), r * a.sin()]
                    });
                    Shape::Triangle { vertices }
                }
            };
            let texture = Texture::random(rng, 4.0, (0.1, 0.9), 0.3);
            let speed = rng.random_range(config.min_speed..=config.max_speed);
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            let velocity = [speed * heading.cos(), speed * heading.sin()];
            // start far enough in that the midpoint of the clip stays on canvas
            let mid = (config.frame_count as f64 - 1.0) / 2.0;
            let margin = extent * 0.5;
            let cx = rng.random_range(margin..w - margin) - velocity[0] * mid;
            let cy = rng.random_range(margin..h - margin) - velocity[1] * mid;
            let angle0 = rng.random_range(0.0..std::f64::consts::TAU);
            let spin = rng.random_range(-config.max_spin..=config.max_spin);
            let growth = rng.random_range(-config.max_growth..=config.max_growth);
            let trajectory = (0..config.frame_count)
                .map(|f| {
                    let f = f as f64;
                    Affine::similarity([cx + velocity[0] * f, cy + velocity[1] * f], angle0 + spin * f, 1.0 + growth * f)
                })
                .collect();
            objects.push(SceneObject { shape, texture, trajectory });
        }
        Self::new(config.width, config.height, background, objects, config.frame_count, seed)
    }

    fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.frame_count {
            return Err(Error::OutOfBounds(format!("frame {frame} of {}", self.frame_count)));
        }
        Ok(())
    }

    /// Topmost object covering canvas point `p` in `frame`.
    pub fn owner_at(&self, frame: usize, p: [f64; 2]) -> Option<usize> {
        (0..self.objects.len()).rev().find(|&k| self.objects[k].shape.contains(self.inverses[k][frame].apply(p)))
    }

    /// Exact colour of the continuous scene at canvas point `p`.
    pub fn color_at(&self, frame: usize, p: [f64; 2]) -> [f32; 3] {
        match self.owner_at(frame, p) {
            Some(k) => self.objects[k].texture.sample(self.inverses[k][frame].apply(p)),
            None => self.background.sample(p),
        }
    }

    pub fn render(&self, frame: usize) -> Result<Frame> {
        self.check_frame(frame)?;
        let mut image = Image::new(3, self.height, self.width);
        let mut owner = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = [x as f64, y as f64];
                let k = self.owner_at(frame, p);
                let rgb = match k {
                    Some(k) => self.objects[k].texture.sample(self.inverses[k][frame].apply(p)),
                    None => self.background.sample(p),
                };
                for (c, v) in rgb.into_iter().enumerate() {
                    image.set(c, y, x, v);
                }
                owner.push(k);
            }
        }
        Ok(Frame { image, owner })
    }

    /// Where the scene point seen at `p` in frame `from` sits in frame `to`,
    /// and whether it is visible there (on canvas and not covered).
    pub fn track_point(&self, from: usize, to: usize, p: [f64; 2]) -> ([f64; 2], bool) {
        let k = self.owner_at(from, p);
        let q = match k {
            Some(k) => self.objects[k].trajectory[to].apply(self.inverses[k][from].apply(p)),
            None => p,
        };
        let on_canvas = q[0] >= 0.0 && q[0] <= (self.width - 1) as f64 && q[1] >= 0.0 && q[1] <= (self.height - 1) as f64;
        // the tracked object covers q by construction; only nearer objects can hide it
        let first_in_front = k.map_or(0, |k| k + 1);
        let covered = (first_in_front..self.objects.len()).any(|j| self.objects[j].shape.contains(self.inverses[j][to].apply(q)));
        (q, on_canvas && !covered)
    }

    /// Dense analytic tracks and flow from every pixel of `from` into `to`.
    pub fn flow_between(&self, from: usize, to: usize, direction: FlowDirection) -> Result<(FlowField, TrackSet)> {
        self.check_frame(from)?;
        self.check_frame(to)?;
        let (w, h) = (self.width, self.height);
        let mut flow = FlowField::zeros(h, w, direction);
        let mut tracks = TrackSet::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64, y as f64];
                let (q, visible) = self.track_point(from, to, p);
                let i = y * w + x;
                tracks.position[i] = [q[0] as f32, q[1] as f32];
                tracks.visible[i] = visible;
                if visible {
                    flow.dx[i] = (q[0] - p[0]) as f32;
                    flow.dy[i] = (q[1] - p[1]) as f32;
                    flow.valid[i] = true;
                }
            }
        }
        Ok((flow, tracks))
    }
}

/// Rendered frames of a pair with analytic flow/tracks in both directions.
#[derive(Clone, Debug)]
pub struct RenderedPair {
    pub source: Frame,
    pub target: Frame,
    pub flow_t2s: FlowField,
    pub flow_s2t: FlowField,
    pub tracks_t2s: TrackSet,
    pub tracks_s2t: TrackSet,
}

pub fn render_scene(scene: &SyntheticScene, src_idx: usize, tgt_idx: usize) -> Result<RenderedPair> {
    let source = scene.render(src_idx)?;
    let target = scene.render(tgt_idx)?;
    let (flow_t2s, tracks_t2s) = scene.flow_between(tgt_idx, src_idx, FlowDirection::TargetToSource)?;
    let (flow_s2t, tracks_s2t) = scene.flow_between(src_idx, tgt_idx, FlowDirection::SourceToTarget)?;
    Ok(RenderedPair { source, target, flow_t2s, flow_s2t, tracks_t2s, tracks_s2t })
}
