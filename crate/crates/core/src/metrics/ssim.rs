//! Windowed SSIM with a Gaussian window.
//!
//! Each frame channel is compared with an 11-tap Gaussian window
//! (sigma = 1.5), evaluated only where the window fits inside the frame,
//! using population (co)variances, `K1 = 0.01`, `K2 = 0.03` and a data range
//! of 1. The score is the mean over all window positions, channels and
//! frames. Frames smaller than the window shrink it to the largest odd size
//! that fits, with sigma scaled in proportion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::Video;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

pub fn ssim(x: &Video, y: &Video) -> Result<f64> {
    ssim_with(x, y, &SsimConfig::default())
}

pub fn ssim_with(x: &Video, y: &Video, cfg: &SsimConfig) -> Result<f64> {
    x.ensure_same_shape(y)?;
    let s = x.shape();
    if s.is_empty() {
        return Err(Error::invalid("video", "empty video"));
    }
    let fit = s.height.min(s.width);
    let win = if cfg.window <= fit { cfg.window } else if fit % 2 == 1 { fit } else { fit - 1 };
    let sigma = cfg.sigma * win as f64 / cfg.window as f64;
    let kernel = gaussian(win, sigma);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mut total = 0.0;
    let mut planes = 0usize;
    for f in 0..s.frames {
        for c in 0..s.channels {
            total += plane_ssim(x.plane(f, c), y.plane(f, c), s.height, s.width, &kernel, c1, c2);
            planes += 1;
        }
    }
    Ok(total / planes as f64)
}

fn gaussian(n: usize, sigma: f64) -> Vec<f64> {
    let r = (n / 2) as f64;
    let w: Vec<f64> = (0..n).map(|i| (-0.5 * ((i as f64 - r) / sigma).powi(2)).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" filtering of `img` (h x w) with `k`.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn plane_ssim(a: &[f32], b: &[f32], h: usize, w: usize, k: &[f64], c1: f64, c2: f64) -> f64 {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_a = filter_valid(&a, h, w, k);
    let mu_b = filter_valid(&b, h, w, k);
    let aa = filter_valid(&prod(&a, &a), h, w, k);
    let bb = filter_valid(&prod(&b, &b), h, w, k);
    let ab = filter_valid(&prod(&a, &b), h, w, k);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    sum / mu_a.len() as f64
}
