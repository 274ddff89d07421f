//! Displacement-cosine motion consistency and a centroid tracker.
//!
//! The score is the mean over frame steps of `(1 + cos) / 2`, where `cos`
//! is the cosine between the two tracklets' displacement vectors. Steps in
//! which either displacement is zero are skipped. When every step is
//! skipped the score is 1 if both tracklets are static and 0 otherwise.
//! Displacements are measured on the torus, wrapped into `[-0.5, 0.5)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::toydata::{TrackPoint, Tracklet};
use crate::video::PixelVideo;

fn wrap(d: f64) -> f64 {
    (d + 0.5).rem_euclid(1.0) - 0.5
}

fn displacements(t: &Tracklet) -> Vec<(f64, f64)> {
    t.0.windows(2).map(|w| (wrap(w[1].x - w[0].x), wrap(w[1].y - w[0].y))).collect()
}

pub fn motion_consistency(a: &Tracklet, b: &Tracklet) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { left: format!("{} track points", a.len()), right: format!("{} track points", b.len()) });
    }
    let (da, db) = (displacements(a), displacements(b));
    let moving = |d: &(f64, f64)| d.0 != 0.0 || d.1 != 0.0;
    let (mut sum, mut n) = (0.0, 0usize);
    for (u, v) in da.iter().zip(&db) {
        if !moving(u) || !moving(v) {
            continue;
        }
        let cos = (u.0 * v.0 + u.1 * v.1) / ((u.0 * u.0 + u.1 * u.1) * (v.0 * v.0 + v.1 * v.1)).sqrt();
        sum += (1.0 + cos.clamp(-1.0, 1.0)) / 2.0;
        n += 1;
    }
    if n > 0 {
        return Ok(sum / n as f64);
    }
    let both_static = !da.iter().any(moving) && !db.iter().any(moving);
    Ok(if both_static { 1.0 } else { 0.0 })
}

/// Tracks the dominant object of a video.
///
/// The background of each frame column is its per-channel median over rows,
/// which fits solid and horizontally graded backgrounds as long as the
/// object covers less than half of any column. A pixel's foreground weight
/// is its absolute difference from that background summed over channels,
/// less the frame's median weight; the track point is the circular centroid
/// of the weights. A frame with no foreground repeats the previous point
/// (the frame centre for the first frame).
pub fn track_centroids(v: &PixelVideo) -> Tracklet {
    let s = v.shape();
    let (h, w) = (s.height, s.width);
    let n = h * w;
    let mut points = Vec::with_capacity(s.frames);
    let mut last = (0.5, 0.5);
    let mut weights = vec![0.0f64; n];
    let mut column = vec![0.0f32; h];
    for f in 0..s.frames {
        weights.iter_mut().for_each(|x| *x = 0.0);
        for c in 0..s.channels {
            let plane = v.plane(f, c);
            for x in 0..w {
                for (y, slot) in column.iter_mut().enumerate() {
                    *slot = plane[y * w + x];
                }
                column.sort_by(f32::total_cmp);
                let bg = if h % 2 == 1 { column[h / 2] } else { 0.5 * (column[h / 2 - 1] + column[h / 2]) };
                for y in 0..h {
                    weights[y * w + x] += (plane[y * w + x] - bg).abs() as f64;
                }
            }
        }
        let mut sorted = weights.clone();
        sorted.sort_by(f64::total_cmp);
        let floor = sorted[n / 2];
        let (mut sx, mut cx, mut sy, mut cy, mut total) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let wt = weights[y * w + x] - floor;
                if wt <= 0.0 {
                    continue;
                }
                let ax = 2.0 * PI * (x as f64 + 0.5) / w as f64;
                let ay = 2.0 * PI * (y as f64 + 0.5) / h as f64;
                sx += wt * ax.sin();
                cx += wt * ax.cos();
                sy += wt * ay.sin();
                cy += wt * ay.cos();
                total += wt;
            }
        }
        if total > 0.0 {
            last = (sx.atan2(cx).rem_euclid(2.0 * PI) / (2.0 * PI), sy.atan2(cy).rem_euclid(2.0 * PI) / (2.0 * PI));
        }
        points.push(TrackPoint { frame: f, x: last.0, y: last.1 });
    }
    Tracklet(points)
}
