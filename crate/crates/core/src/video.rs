//! Dense video tensors shared by the latent and pixel domains.
//!
//! Storage is row-major `[frame][channel][row][col]` in `f32`. Pixel videos
//! hold values in `[0, 1]`; latents are unconstrained.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VideoShape {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl VideoShape {
    pub const fn new(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { frames, channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for VideoShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.frames, self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    shape: VideoShape,
    data: Vec<f32>,
}

/// A video in the space where diffusion runs.
pub type LatentVideo = Video;
/// A decoded video with values in `[0, 1]`.
pub type PixelVideo = Video;

impl Video {
    pub fn zeros(shape: VideoShape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: VideoShape, value: f32) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: VideoShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                left: shape.to_string(),
                right: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Standard normal samples drawn in storage order.
    pub fn randn(shape: VideoShape, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..shape.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> VideoShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.shape.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f32] {
        let n = self.shape.frame_len();
        &mut self.data[f * n..(f + 1) * n]
    }

    pub fn plane(&self, f: usize, c: usize) -> &[f32] {
        let p = self.shape.plane_len();
        let start = f * self.shape.frame_len() + c * p;
        &self.data[start..start + p]
    }

    pub fn at(&self, f: usize, c: usize, y: usize, x: usize) -> f32 {
        let s = self.shape;
        self.data[((f * s.channels + c) * s.height + y) * s.width + x]
    }

    pub fn set(&mut self, f: usize, c: usize, y: usize, x: usize, v: f32) {
        let s = self.shape;
        self.data[((f * s.channels + c) * s.height + y) * s.width + x] = v;
    }

    pub fn ensure_same_shape(&self, other: &Video) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.to_string(),
                right: other.shape.to_string(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Video {
        Video { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two same-shaped videos.
    pub fn zip_map(&self, other: &Video, f: impl Fn(f32, f32) -> f32) -> Result<Video> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Video { shape: self.shape, data })
    }

    pub fn clamp01(&self) -> Video {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Video) -> Result<f32> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
    }

    /// Frames `[start, end)` as a new video.
    pub fn frames_range(&self, start: usize, end: usize) -> Result<Video> {
        if start > end || end > self.shape.frames {
            return Err(Error::invalid(
                "frame range",
                format!("{start}..{end} outside 0..{}", self.shape.frames),
            ));
        }
        let n = self.shape.frame_len();
        let shape = VideoShape { frames: end - start, ..self.shape };
        Ok(Video { shape, data: self.data[start * n..end * n].to_vec() })
    }

    /// Concatenate along the frame axis.
    pub fn concat_frames(parts: &[&Video]) -> Result<Video> {
        let first = parts.first().ok_or_else(|| Error::invalid("frames", "nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            let s = p.shape;
            if (s.channels, s.height, s.width) != (first.shape.channels, first.shape.height, first.shape.width) {
                return Err(Error::ShapeMismatch { left: first.shape.to_string(), right: s.to_string() });
            }
            frames += s.frames;
            data.extend_from_slice(&p.data);
        }
        Ok(Video { shape: VideoShape { frames, ..first.shape }, data })
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Video) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
