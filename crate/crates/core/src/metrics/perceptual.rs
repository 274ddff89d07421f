//! Perceptual distance.
//!
//! The default scorer is a pyramid proxy: level 0 is the video itself and
//! each further level is a 2x2 average pool of the previous one. The
//! distance is the weighted sum over levels of the mean absolute
//! difference. Weights sum to one, so black against white scores exactly 1,
//! the largest possible value for videos in `[0, 1]`. Levels that would be
//! smaller than one pixel are dropped and the remaining weights rescaled.

use crate::error::Result;
use crate::video::{Video, VideoShape};

pub trait PerceptualScorer: Send + Sync {
    fn distance(&self, x: &Video, y: &Video) -> Result<f64>;
    fn name(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidProxy {
    pub weights: Vec<f64>,
}

impl Default for PyramidProxy {
    fn default() -> Self {
        Self { weights: vec![0.5, 0.3, 0.2] }
    }
}

fn pool2(v: &Video) -> Video {
    let s = v.shape();
    let (h, w) = (s.height / 2, s.width / 2);
    let mut out = Video::zeros(VideoShape::new(s.frames, s.channels, h, w));
    for f in 0..s.frames {
        for c in 0..s.channels {
            for y in 0..h {
                for x in 0..w {
                    let m = 0.25
                        * (v.at(f, c, 2 * y, 2 * x)
                            + v.at(f, c, 2 * y, 2 * x + 1)
                            + v.at(f, c, 2 * y + 1, 2 * x)
                            + v.at(f, c, 2 * y + 1, 2 * x + 1));
                    out.set(f, c, y, x, m);
                }
            }
        }
    }
    out
}

fn mean_abs_diff(a: &Video, b: &Video) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / a.data().len() as f64
}

impl PerceptualScorer for PyramidProxy {
    fn distance(&self, x: &Video, y: &Video) -> Result<f64> {
        x.ensure_same_shape(y)?;
        let (mut a, mut b) = (x.clone(), y.clone());
        let (mut total, mut used) = (0.0, 0.0);
        for (level, &w) in self.weights.iter().enumerate() {
            if level > 0 {
                if a.shape().height < 2 || a.shape().width < 2 {
                    break;
                }
                a = pool2(&a);
                b = pool2(&b);
            }
            total += w * mean_abs_diff(&a, &b);
            used += w;
        }
        Ok(if used > 0.0 { total / used } else { 0.0 })
    }

    fn name(&self) -> &str {
        "pyramid_proxy"
    }
}
