//! Planar float images in `[0, 1]`, channel-major (`[C, H, W]`).

use crate::numerics::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("{} values for a {channels}x{height}x{width} image", data.len())));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f32) -> Self {
        Self { channels, height, width, data: vec![v; channels * height * width] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        (self.height, self.width) == (other.height, other.width)
    }

    /// Rec. 601 luma for RGB, identity for single-channel images.
    pub fn luma(&self) -> Vec<f32> {
        match self.channels {
            3 => {
                let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
                r.iter().zip(g).zip(b).map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b).collect()
            }
            _ => self.plane(0).to_vec(),
        }
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.iter().map(|&v| T::of(v as f64)).collect()).expect("image dims are positive")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("image tensor must be [C, H, W], got {s:?}")));
        }
        Self::from_data(s[0], s[1], s[2], t.data().iter().map(|v| v.f64() as f32).collect())
    }
}
