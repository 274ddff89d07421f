//! Procedural prompt-conditioned clips with analytic ground-truth motion.
//!
//! Each class is a scene family: a shape with a characteristic heading.
//! Colors, start position, speed and background are drawn per clip, so a
//! class is identified by its shape and motion rather than its palette.
//! Objects move on a torus: positions wrap around the frame edges.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_png_frames, write_png_frames};
use crate::video::{PixelVideo, Video, VideoShape};

pub const NUM_CLASSES: usize = 3;
pub const DEFAULT_FRAMES: usize = 16;
pub const DEFAULT_SIZE: usize = 32;
pub const FORMAT_VERSION: u32 = 1;

/// Subsamples per pixel edge used for anti-aliasing.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Bar,
}

impl Shape {
    pub fn for_class(class_id: u32) -> Shape {
        match class_id as usize % NUM_CLASSES {
            0 => Shape::Circle,
            1 => Shape::Square,
            _ => Shape::Bar,
        }
    }
}

/// Mean heading of a class in radians; headings are spread evenly.
pub fn class_heading(class_id: u32) -> f64 {
    2.0 * PI * (class_id as usize % NUM_CLASSES) as f64 / NUM_CLASSES as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    Solid { color: [f32; 3] },
    /// Horizontal ramp from `left` to `right`.
    Gradient { left: [f32; 3], right: [f32; 3] },
}

impl Background {
    fn color_at(&self, x: usize, width: usize) -> [f32; 3] {
        match *self {
            Background::Solid { color } => color,
            Background::Gradient { left, right } => {
                let u = if width > 1 { x as f32 / (width - 1) as f32 } else { 0.0 };
                [0, 1, 2].map(|c| left[c] + (right[c] - left[c]) * u)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionPolicy {
    Wrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub class_id: u32,
    pub shape: Shape,
    pub color: [f32; 3],
    /// Object center at frame 0, as fractions of (width, height).
    pub start_xy: [f64; 2],
    /// Frame fractions per frame.
    pub velocity_xy: [f64; 2],
    /// Extent as a fraction of the smaller frame side.
    pub size: f64,
    pub background: Background,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_policy")]
    pub policy: MotionPolicy,
}

fn default_policy() -> MotionPolicy {
    MotionPolicy::Wrap
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 {
            return Err(Error::invalid("frame_count", "must be at least 1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("height", "frame dimensions must be positive"));
        }
        if !(self.size > 0.0 && self.size.is_finite()) {
            return Err(Error::invalid("size", format!("{} must be positive", self.size)));
        }
        if !self.start_xy.iter().chain(&self.velocity_xy).all(|v| v.is_finite()) {
            return Err(Error::invalid("start_xy", "positions and velocities must be finite"));
        }
        Ok(())
    }

    pub fn video_shape(&self) -> VideoShape {
        VideoShape::new(self.frame_count, 3, self.height, self.width)
    }

    /// Half extents (x, y) in pixels.
    fn half_extent(&self) -> (f64, f64) {
        let side = self.size * self.height.min(self.width) as f64;
        match self.shape {
            Shape::Circle | Shape::Square => (side / 2.0, side / 2.0),
            Shape::Bar => (side / 2.0, side * 0.175),
        }
    }

    fn covers(&self, dx: f64, dy: f64) -> bool {
        let (hx, hy) = self.half_extent();
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= hx * hx,
            Shape::Square | Shape::Bar => dx.abs() <= hx && dy.abs() <= hy,
        }
    }

    pub fn background_frame(&self) -> Video {
        let mut v = Video::zeros(VideoShape::new(1, 3, self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                let c = self.background.color_at(x, self.width);
                for (ch, val) in c.iter().enumerate() {
                    v.set(0, ch, y, x, *val);
                }
            }
        }
        v
    }
}

/// A point of an object trajectory, positions as frame fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tracklet(pub Vec<TrackPoint>);

impl Tracklet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Closed-form positions `start + k * velocity`, wrapped into `[0, 1)`.
pub fn trajectory_of(p: &SceneParams) -> Tracklet {
    Tracklet(
        (0..p.frame_count)
            .map(|k| TrackPoint {
                frame: k,
                x: (p.start_xy[0] + k as f64 * p.velocity_xy[0]).rem_euclid(1.0),
                y: (p.start_xy[1] + k as f64 * p.velocity_xy[1]).rem_euclid(1.0),
            })
            .collect(),
    )
}

/// Signed offset on a ring of circumference `period`, in `[-period/2, period/2)`.
fn wrap_delta(d: f64, period: f64) -> f64 {
    (d + period / 2.0).rem_euclid(period) - period / 2.0
}

pub fn render_scene(p: &SceneParams) -> Result<PixelVideo> {
    p.validate()?;
    let mut v = Video::zeros(p.video_shape());
    let (w, h) = (p.width as f64, p.height as f64);
    let n = SUPERSAMPLE;
    let inv = 1.0 / (n * n) as f32;
    for pt in trajectory_of(p).0 {
        let (cx, cy) = (pt.x * w, pt.y * h);
        for y in 0..p.height {
            for x in 0..p.width {
                let mut hits = 0usize;
                for sy in 0..n {
                    for sx in 0..n {
                        let px = x as f64 + (sx as f64 + 0.5) / n as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / n as f64;
                        if p.covers(wrap_delta(px - cx, w), wrap_delta(py - cy, h)) {
                            hits += 1;
                        }
                    }
                }
                let cov = hits as f32 * inv;
                let bg = p.background.color_at(x, p.width);
                for c in 0..3 {
                    v.set(pt.frame, c, y, x, bg[c] * (1.0 - cov) + p.color[c] * cov);
                }
            }
        }
    }
    Ok(v)
}

/// Distribution knobs for scene sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneDistribution {
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub size_range: [f64; 2],
    pub speed_range: [f64; 2],
    /// Maximum deviation from the class heading, radians.
    pub heading_jitter: f64,
    pub object_channel_range: [f32; 2],
    pub background_channel_range: [f32; 2],
    pub gradient_probability: f64,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            frame_count: DEFAULT_FRAMES,
            height: DEFAULT_SIZE,
            width: DEFAULT_SIZE,
            size_range: [0.28, 0.38],
            speed_range: [0.02, 0.035],
            heading_jitter: 20f64.to_radians(),
            object_channel_range: [0.55, 1.0],
            background_channel_range: [0.0, 0.3],
            gradient_probability: 0.5,
        }
    }
}

impl SceneDistribution {
    pub fn sample(&self, class_id: u32, rng: &mut ChaCha8Rng) -> SceneParams {
        let ch = |rng: &mut ChaCha8Rng, r: [f32; 2]| -> [f32; 3] {
            [0, 1, 2].map(|_| rng.random_range(r[0]..=r[1]))
        };
        let color = ch(rng, self.object_channel_range);
        let heading = class_heading(class_id) + rng.random_range(-self.heading_jitter..=self.heading_jitter);
        let speed = rng.random_range(self.speed_range[0]..=self.speed_range[1]);
        let size = rng.random_range(self.size_range[0]..=self.size_range[1]);
        let start_xy = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let background = if rng.random_bool(self.gradient_probability) {
            Background::Gradient {
                left: ch(rng, self.background_channel_range),
                right: ch(rng, self.background_channel_range),
            }
        } else {
            Background::Solid { color: ch(rng, self.background_channel_range) }
        };
        SceneParams {
            class_id,
            shape: Shape::for_class(class_id),
            color,
            start_xy,
            velocity_xy: [speed * heading.cos(), speed * heading.sin()],
            size,
            background,
            frame_count: self.frame_count,
            height: self.height,
            width: self.width,
            policy: MotionPolicy::Wrap,
        }
    }

    /// Uniform class, then scene parameters for that class.
    pub fn sample_any(&self, rng: &mut ChaCha8Rng) -> SceneParams {
        let class = rng.random_range(0..NUM_CLASSES as u32);
        self.sample(class, rng)
    }
}

/// Two scenes of different classes. The first class is uniform over all
/// classes, the second uniform over the remaining ones.
pub fn sample_prompt_pair(rng_seed: u64) -> (SceneParams, SceneParams) {
    sample_prompt_pair_with(rng_seed, &SceneDistribution::default())
}

pub fn sample_prompt_pair_with(rng_seed: u64, dist: &SceneDistribution) -> (SceneParams, SceneParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let a = rng.random_range(0..NUM_CLASSES as u32);
    let mut b = rng.random_range(0..NUM_CLASSES as u32 - 1);
    if b >= a {
        b += 1;
    }
    let pa = dist.sample(a, &mut rng);
    let pb = dist.sample(b, &mut rng);
    (pa, pb)
}

/// A reproducible list of training scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub scenes: Vec<SceneParams>,
}

impl ToyDataset {
    pub fn generate(count: usize, seed: u64, dist: &SceneDistribution) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { scenes: (0..count).map(|_| dist.sample_any(&mut rng)).collect() }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub format_version: u32,
    pub params: SceneParams,
    pub tracklet: Tracklet,
}

/// Renders `p` into `dir` as PNG frames plus `manifest.json`.
pub fn write_clip(dir: &Path, p: &SceneParams) -> Result<PixelVideo> {
    let v = render_scene(p)?;
    write_png_frames(dir, &v)?;
    let m = ClipManifest { format_version: FORMAT_VERSION, params: *p, tracklet: trajectory_of(p) };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&m)?)?;
    Ok(v)
}

/// Reads a clip written by [`write_clip`]; frames are 8-bit quantised.
pub fn read_clip(dir: &Path) -> Result<(PixelVideo, ClipManifest)> {
    let m: ClipManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::invalid("format_version", format!("unsupported clip format {}", m.format_version)));
    }
    Ok((read_png_frames(dir)?, m))
}

/// Intensity-weighted circular centroid of `|frame - background|`, as frame
/// fractions. Returns `None` when the frame equals the background.
pub fn weighted_centroid(frame: &Video, f: usize, background: &Video) -> Option<(f64, f64)> {
    let s = frame.shape();
    let (mut sx, mut cx, mut sy, mut cy, mut total) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..s.height {
        for x in 0..s.width {
            let mut wgt = 0.0f64;
            for c in 0..s.channels {
                wgt += (frame.at(f, c, y, x) - background.at(0, c, y, x)).abs() as f64;
            }
            if wgt == 0.0 {
                continue;
            }
            let ax = 2.0 * PI * (x as f64 + 0.5) / s.width as f64;
            let ay = 2.0 * PI * (y as f64 + 0.5) / s.height as f64;
            sx += wgt * ax.sin();
            cx += wgt * ax.cos();
            sy += wgt * ay.sin();
            cy += wgt * ay.cos();
            total += wgt;
        }
    }
    if total == 0.0 {
        return None;
    }
    let fx = sx.atan2(cx).rem_euclid(2.0 * PI) / (2.0 * PI);
    let fy = sy.atan2(cy).rem_euclid(2.0 * PI) / (2.0 * PI);
    Some((fx, fy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered_circle() -> SceneParams {
        SceneParams {
            class_id: 0,
            shape: Shape::Circle,
            color: [1.0, 0.5, 0.25],
            start_xy: [0.5, 0.5],
            velocity_xy: [0.0, 0.0],
            size: 0.3,
            background: Background::Solid { color: [0.1, 0.1, 0.1] },
            frame_count: 4,
            height: 32,
            width: 32,
            policy: MotionPolicy::Wrap,
        }
    }

    #[test]
    fn static_scene_frames_are_identical() {
        let v = render_scene(&centered_circle()).unwrap();
        for f in 1..4 {
            assert_eq!(v.frame(0), v.frame(f));
        }
    }

    #[test]
    fn center_has_object_color_and_corner_background() {
        let v = render_scene(&centered_circle()).unwrap();
        assert_eq!([0, 1, 2].map(|c| v.at(0, c, 16, 16)), [1.0, 0.5, 0.25]);
        assert_eq!([0, 1, 2].map(|c| v.at(0, c, 0, 0)), [0.1, 0.1, 0.1]);
    }

    #[test]
    fn degenerate_size_is_rejected() {
        let p = SceneParams { size: 0.0, ..centered_circle() };
        assert_eq!(render_scene(&p).unwrap_err().field(), Some("size"));
    }

    #[test]
    fn render_is_deterministic() {
        let (a, _) = sample_prompt_pair(9);
        assert!(render_scene(&a).unwrap().bit_eq(&render_scene(&a).unwrap()));
    }

    #[test]
    fn trajectory_arithmetic() {
        let p = SceneParams { velocity_xy: [0.01, 0.0], frame_count: 3, ..centered_circle() };
        let t = trajectory_of(&p);
        let xs: Vec<f64> = t.0.iter().map(|q| q.x).collect();
        for (x, want) in xs.iter().zip([0.5, 0.51, 0.52]) {
            assert!((x - want).abs() < 1e-12);
        }
        assert!(t.0.iter().all(|q| q.y == 0.5));
        let still = trajectory_of(&centered_circle());
        assert!(still.0.iter().all(|q| q.x == 0.5 && q.y == 0.5));
    }

    #[test]
    fn wrapping_matches_step_simulation() {
        let p = SceneParams { start_xy: [0.9, 0.05], velocity_xy: [0.07, -0.03], frame_count: 12, ..centered_circle() };
        let t = trajectory_of(&p);
        let (mut x, mut y) = (p.start_xy[0], p.start_xy[1]);
        for q in &t.0 {
            assert!((q.x - x).abs() < 1e-9 && (q.y - y).abs() < 1e-9, "{q:?} vs ({x}, {y})");
            x += p.velocity_xy[0];
            y += p.velocity_xy[1];
            if x >= 1.0 {
                x -= 1.0;
            }
            if y < 0.0 {
                y += 1.0;
            }
        }
    }

    #[test]
    fn mean_brightness_matches_direct_recomputation() {
        // Independent per-pixel area computation for a square aligned to the grid.
        let p = SceneParams {
            shape: Shape::Square,
            size: 0.25,
            start_xy: [0.5, 0.5],
            frame_count: 1,
            ..centered_circle()
        };
        let v = render_scene(&p).unwrap();
        // 8x8 pixel square exactly covering pixels 12..20 on both axes.
        let mut total = 0.0f64;
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let inside = (12..20).contains(&x) && (12..20).contains(&y);
                    total += if inside { p.color[c] as f64 } else { 0.1 };
                }
            }
        }
        let want = total / (3.0 * 1024.0);
        assert!((v.mean() - want).abs() < 1e-6, "{} vs {want}", v.mean());
    }

    #[test]
    fn centroid_tracks_trajectory_within_a_pixel() {
        for seed in 0..20 {
            let (a, b) = sample_prompt_pair(seed);
            for p in [a, b] {
                let v = render_scene(&p).unwrap();
                let bg = p.background_frame();
                for q in trajectory_of(&p).0 {
                    let (x, y) = weighted_centroid(&v, q.frame, &bg).unwrap();
                    let dx = wrap_delta(x - q.x, 1.0) * p.width as f64;
                    let dy = wrap_delta(y - q.y, 1.0) * p.height as f64;
                    assert!(dx.hypot(dy) < 1.0, "seed {seed} frame {}: off by ({dx}, {dy})", q.frame);
                }
            }
        }
    }

    #[test]
    fn prompt_pairs_are_seeded_and_distinct() {
        assert_eq!(sample_prompt_pair(3), sample_prompt_pair(3));
        for seed in 0..100 {
            let (a, b) = sample_prompt_pair(seed);
            assert_ne!(a.class_id, b.class_id);
        }
    }

    #[test]
    fn class_histogram_is_uniform() {
        let n = 10_000usize;
        let mut counts = [[0usize; NUM_CLASSES]; 2];
        for seed in 0..n as u64 {
            let (a, b) = sample_prompt_pair(seed);
            counts[0][a.class_id as usize] += 1;
            counts[1][b.class_id as usize] += 1;
        }
        let p = 1.0 / NUM_CLASSES as f64;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for side in counts {
            for c in side {
                assert!((c as f64 - mean).abs() < 3.0 * sd, "{side:?}");
            }
        }
    }

    #[test]
    fn clip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = centered_circle();
        let v = write_clip(dir.path(), &p).unwrap();
        let (back, m) = read_clip(dir.path()).unwrap();
        assert_eq!(m.params, p);
        assert_eq!(m.tracklet, trajectory_of(&p));
        assert!(back.bit_eq(&crate::io::quantized(&v)));
    }
}
