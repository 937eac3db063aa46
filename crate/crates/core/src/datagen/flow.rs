use crate::image::Image;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowDirection {
    TargetToSource,
    SourceToTarget,
}

/// Per-pixel displacement; invalid pixels hold zero displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub direction: FlowDirection,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize, direction: FlowDirection) -> Self {
        let n = height * width;
        Self { height, width, direction, dx: vec![0.0; n], dy: vec![0.0; n], valid: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }

    pub fn magnitude(&self) -> Vec<f32> {
        self.dx.iter().zip(&self.dy).map(|(&x, &y)| (x * x + y * y).sqrt()).collect()
    }

    /// Mean magnitude over valid pixels moving more than `min_motion` px;
    /// zero when nothing moves.
    pub fn mean_moving_magnitude(&self, min_motion: f32) -> f32 {
        let (sum, count) =
            self.magnitude().into_iter().zip(&self.valid).filter(|&(m, &v)| v && m > min_motion).fold((0.0f64, 0usize), |(s, c), (m, _)| (s + m as f64, c + 1));
        if count == 0 {
            0.0
        } else {
            (sum / count as f64) as f32
        }
    }
}

/// Per-query-pixel match in the other frame, with visibility.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet {
    pub height: usize,
    pub width: usize,
    pub position: Vec<[f32; 2]>,
    pub visible: Vec<bool>,
}

impl TrackSet {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, position: vec![[0.0; 2]; height * width], visible: vec![false; height * width] }
    }

    pub fn at(&self, x: usize, y: usize) -> ([f32; 2], bool) {
        let i = y * self.width + x;
        (self.position[i], self.visible[i])
    }

    /// The matched pixel, rounded; `None` when not visible.
    pub fn matched_pixel(&self, x: usize, y: usize) -> Option<(usize, usize)> {
        let (p, vis) = self.at(x, y);
        if !vis {
            return None;
        }
        let (mx, my) = (p[0].round(), p[1].round());
        if mx < 0.0 || my < 0.0 || mx as usize >= self.width || my as usize >= self.height {
            return None;
        }
        Some((mx as usize, my as usize))
    }
}

/// Exhaustive SSD block matching. Returns target-to-source flow: for each
/// `block`-sized tile of `tgt`, the displacement into `src` within `±radius`
/// with least squared difference. Ties go to the smaller displacement.
pub fn estimate_flow_block_matching(src: &Image, tgt: &Image, block: usize, radius: usize) -> Result<FlowField> {
    if !src.same_dims(tgt) || src.channels != tgt.channels {
        return Err(Error::Shape(format!(
            "block matching needs equal dims, got {}x{}x{} and {}x{}x{}",
            src.channels, src.height, src.width, tgt.channels, tgt.height, tgt.width
        )));
    }
    let (h, w) = (src.height, src.width);
    if block == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    if radius >= h.min(w) {
        return Err(Error::Config(format!("search radius {radius} must be below the smaller image dim {}", h.min(w))));
    }
    let r = radius as isize;
    let mut flow = FlowField::zeros(h, w, FlowDirection::TargetToSource);
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (bh, bw) = (block.min(h - by), block.min(w - bx));
            let mut best: Option<(f64, isize, isize, isize)> = None;
            for dy in -r..=r {
                let y0 = by as isize + dy;
                if y0 < 0 || y0 as usize + bh > h {
                    continue;
                }
                for dx in -r..=r {
                    let x0 = bx as isize + dx;
                    if x0 < 0 || x0 as usize + bw > w {
                        continue;
                    }
                    let mut ssd = 0.0f64;
                    for c in 0..src.channels {
                        for yy in 0..bh {
                            let t_row = &tgt.plane(c)[(by + yy) * w + bx..][..bw];
                            let s_row = &src.plane(c)[(y0 as usize + yy) * w + x0 as usize..][..bw];
                            ssd += t_row.iter().zip(s_row).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
                        }
                    }
                    let norm = dx * dx + dy * dy;
                    let better = match best {
                        None => true,
                        Some((s, n, _, _)) => ssd < s || (ssd == s && norm < n),
                    };
                    if better {
                        best = Some((ssd, norm, dx, dy));
                    }
                }
            }
            let (_, _, dx, dy) = best.expect("zero displacement is always in range");
            for yy in by..by + bh {
                for xx in bx..bx + bw {
                    let i = yy * w + xx;
                    flow.dx[i] = dx as f32;
                    flow.dy[i] = dy as f32;
                    flow.valid[i] = true;
                }
            }
        }
    }
    Ok(flow)
}
