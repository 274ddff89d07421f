use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{Video, VideoShape};

/// Tubelet size in (frames, rows, cols).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Patch {
    pub fn features(&self, channels: usize) -> usize {
        self.frames * self.height * self.width * channels
    }

    pub fn check(&self, shape: VideoShape) -> Result<()> {
        if !shape.frames.is_multiple_of(self.frames) || !shape.height.is_multiple_of(self.height) || !shape.width.is_multiple_of(self.width) {
            return Err(Error::invalid(
                "shape",
                format!(
                    "{shape} is not divisible by patch {}x{}x{}",
                    self.frames, self.height, self.width
                ),
            ));
        }
        Ok(())
    }

    /// Token grid (frames, rows, cols) for a video shape.
    pub fn grid(&self, shape: VideoShape) -> (usize, usize, usize) {
        (shape.frames / self.frames, shape.height / self.height, shape.width / self.width)
    }
}

/// Video `[F, C, H, W]` to tokens `[Ft * Ht * Wt, pf * ph * pw * C]`.
/// Feature order within a token is (dt, dy, dx, channel).
pub fn patchify(v: &Video, p: Patch) -> Result<Vec<f32>> {
    let s = v.shape();
    p.check(s)?;
    let (gf, gh, gw) = p.grid(s);
    let feat = p.features(s.channels);
    let mut out = vec![0.0; gf * gh * gw * feat];
    for tf in 0..gf {
        for ty in 0..gh {
            for tx in 0..gw {
                let tok = (tf * gh + ty) * gw + tx;
                let row = &mut out[tok * feat..(tok + 1) * feat];
                let mut k = 0;
                for dt in 0..p.frames {
                    for dy in 0..p.height {
                        for dx in 0..p.width {
                            for c in 0..s.channels {
                                row[k] = v.at(tf * p.frames + dt, c, ty * p.height + dy, tx * p.width + dx);
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(tokens: &[f32], shape: VideoShape, p: Patch) -> Result<Video> {
    p.check(shape)?;
    let (gf, gh, gw) = p.grid(shape);
    let feat = p.features(shape.channels);
    if tokens.len() != gf * gh * gw * feat {
        return Err(Error::ShapeMismatch {
            left: shape.to_string(),
            right: format!("{} token values", tokens.len()),
        });
    }
    let mut v = Video::zeros(shape);
    for tf in 0..gf {
        for ty in 0..gh {
            for tx in 0..gw {
                let tok = (tf * gh + ty) * gw + tx;
                let row = &tokens[tok * feat..(tok + 1) * feat];
                let mut k = 0;
                for dt in 0..p.frames {
                    for dy in 0..p.height {
                        for dx in 0..p.width {
                            for c in 0..shape.channels {
                                v.set(tf * p.frames + dt, c, ty * p.height + dy, tx * p.width + dx, row[k]);
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(v)
}
