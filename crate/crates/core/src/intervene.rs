//! User interventions at the fork point.
//!
//! The clean estimate at the fork is decoded, edited by a transform `tau`,
//! re-encoded and placed back at noise level `T - K` before the disjoint
//! phase resumes. The default [`RenoiseMode::Delta`] shifts the fork latent by
//! `sqrt(ab_{T-K}) * (E(tau(x)) - E(x))`, which is what a DDIM step would have
//! produced had the clean estimate been the edited one. A no-op edit leaves
//! the latent untouched, so the identity transform reproduces the
//! uninterrupted run exactly. [`RenoiseMode::Fresh`] instead draws a
//! forward-process sample of the edited estimate with seeded noise.
//!
//! When `K = 0` there is no clean estimate yet; the fork latent `z_T` stands
//! in for it and the shift uses a unit coefficient.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::LatentCodec;
use crate::error::{Error, Result};
use crate::forksampler::{ForkSampler, GenerationTrace, InterventionRecord, MatchPair};
pub use crate::forksampler::RenoiseMode;
use crate::io::read_image;
use crate::schedule::{add_noise, Timestep};
use crate::video::{PixelVideo, Video, VideoShape};

/// An image given by file path or inline as `[channels][height][width]` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Path(PathBuf),
    Inline { channels: usize, height: usize, width: usize, data: Vec<f32> },
}

impl ImageRef {
    pub fn load(&self, field: &str) -> Result<Video> {
        match self {
            ImageRef::Path(p) => {
                if !p.exists() {
                    return Err(Error::invalid(field, format!("file {} does not exist", p.display())));
                }
                read_image(p)
            }
            ImageRef::Inline { channels, height, width, data } => {
                Video::from_vec(VideoShape::new(1, *channels, *height, *width), data.clone())
                    .map_err(|e| Error::invalid(field, e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Color { color: [f32; 3] },
    Image { image: ImageRef },
}

/// The edit `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Random factors drawn once per video from the spec's seed:
    /// brightness and contrast and saturation in `[1 - s, 1 + s]`, hue
    /// rotation in `[-hue, hue]` turns.
    ColorJitter {
        #[serde(default)]
        brightness: f32,
        #[serde(default)]
        contrast: f32,
        #[serde(default)]
        saturation: f32,
        #[serde(default)]
        hue: f32,
    },
    /// Per-frame, per-channel matching of the empirical CDF to a reference image.
    HistogramMatch { reference: ImageRef },
    Gamma { gamma: f32 },
    /// `mask * payload + (1 - mask) * x` with a single-frame mask in `[0, 1]`.
    MaskComposite { mask: ImageRef, payload: Payload },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchScope {
    #[default]
    Both,
    AOnly,
    BOnly,
}

impl BranchScope {
    pub fn touches_a(self) -> bool {
        matches!(self, BranchScope::Both | BranchScope::AOnly)
    }
    pub fn touches_b(self) -> bool {
        matches!(self, BranchScope::Both | BranchScope::BOnly)
    }
}

fn default_renoise() -> RenoiseMode {
    RenoiseMode::Delta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    #[serde(flatten)]
    pub transform: Transform,
    #[serde(default)]
    pub branch_scope: BranchScope,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_renoise")]
    pub renoise: RenoiseMode,
}

impl InterventionSpec {
    pub fn new(transform: Transform) -> Self {
        Self { transform, branch_scope: BranchScope::Both, seed: 0, renoise: RenoiseMode::Delta }
    }

    pub fn scoped(mut self, scope: BranchScope) -> Self {
        self.branch_scope = scope;
        self
    }

    /// Checks parameters and, for file-backed images, that they load and fit `frame`.
    pub fn validate(&self, frame: Option<VideoShape>) -> Result<()> {
        match &self.transform {
            Transform::Identity => Ok(()),
            Transform::Gamma { gamma } => {
                if !(gamma.is_finite() && *gamma > 0.0) {
                    return Err(Error::invalid("gamma", format!("must be finite and > 0, got {gamma}")));
                }
                Ok(())
            }
            Transform::ColorJitter { brightness, contrast, saturation, hue } => {
                for (name, v, max) in
                    [("brightness", *brightness, 1.0), ("contrast", *contrast, 1.0), ("saturation", *saturation, 1.0), ("hue", *hue, 0.5)]
                {
                    if !(v.is_finite() && (0.0..=max).contains(&v)) {
                        return Err(Error::invalid(name, format!("must be in [0, {max}], got {v}")));
                    }
                }
                Ok(())
            }
            Transform::HistogramMatch { reference } => {
                let r = reference.load("reference")?;
                if r.shape().channels != 3 && r.shape().channels != 1 {
                    return Err(Error::invalid("reference", "must be grayscale or RGB"));
                }
                Ok(())
            }
            Transform::MaskComposite { mask, payload } => {
                let m = mask.load("mask")?;
                if let Some(f) = frame {
                    if m.shape().height != f.height || m.shape().width != f.width {
                        return Err(Error::invalid(
                            "mask",
                            format!("mask is {}x{}, frames are {}x{}", m.shape().height, m.shape().width, f.height, f.width),
                        ));
                    }
                }
                match payload {
                    Payload::Color { color } => {
                        if color.iter().any(|c| !c.is_finite()) {
                            return Err(Error::invalid("payload", "color must be finite"));
                        }
                    }
                    Payload::Image { image } => {
                        let p = image.load("payload")?;
                        if let Some(f) = frame {
                            if p.shape().height != f.height || p.shape().width != f.width {
                                return Err(Error::invalid("payload", "payload image size differs from the frames"));
                            }
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

/// Applies `tau` to every frame of `x`. Every kind except identity clamps to `[0, 1]`.
pub fn apply_tau(x: &PixelVideo, spec: &InterventionSpec) -> Result<PixelVideo> {
    let s = x.shape();
    spec.validate(Some(s))?;
    match &spec.transform {
        Transform::Identity => Ok(x.clone()),
        Transform::Gamma { gamma } => {
            let g = *gamma;
            Ok(x.map(|v| v.clamp(0.0, 1.0).powf(g)))
        }
        Transform::ColorJitter { brightness, contrast, saturation, hue } => {
            if s.channels != 3 {
                return Err(Error::invalid("channels", "color jitter needs RGB"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut factor = |s: f32| if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
            let (b, c, sat) = (factor(*brightness), factor(*contrast), factor(*saturation));
            let h = if *hue > 0.0 { rng.random_range(-*hue..=*hue) } else { 0.0 };
            Ok(color_jitter(x, b, c, sat, h))
        }
        Transform::HistogramMatch { reference } => histogram_match(x, &reference.load("reference")?),
        Transform::MaskComposite { mask, payload } => {
            let m = mask.load("mask")?;
            let pay = match payload {
                Payload::Color { color } => {
                    let mut v = Video::zeros(VideoShape::new(1, s.channels, s.height, s.width));
                    for c in 0..s.channels {
                        let val = color[c.min(2)];
                        v.frame_mut(0)[c * s.plane_len()..(c + 1) * s.plane_len()].iter_mut().for_each(|p| *p = val);
                    }
                    v
                }
                Payload::Image { image } => image.load("payload")?,
            };
            Ok(mask_composite(x, &m, &pay))
        }
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn color_jitter(x: &Video, brightness: f32, contrast: f32, saturation: f32, hue_turns: f32) -> Video {
    let s = x.shape();
    let n = s.plane_len();
    let mut out = x.clone();
    let (cos, sin) = ((hue_turns * std::f32::consts::TAU).cos(), (hue_turns * std::f32::consts::TAU).sin());
    for f in 0..s.frames {
        let fr = out.frame_mut(f);
        let mut mean_luma = 0.0f64;
        for i in 0..n {
            for c in 0..3 {
                fr[c * n + i] *= brightness;
            }
            mean_luma += luma(fr[i], fr[n + i], fr[2 * n + i]) as f64;
        }
        let m = (mean_luma / n as f64) as f32;
        for i in 0..n {
            let mut px = [fr[i], fr[n + i], fr[2 * n + i]];
            for v in &mut px {
                *v = (*v - m) * contrast + m;
            }
            let y = luma(px[0], px[1], px[2]);
            for v in &mut px {
                *v = y + (*v - y) * saturation;
            }
            if hue_turns != 0.0 {
                // Rotate chroma in YIQ space.
                let i_ = 0.596 * px[0] - 0.274 * px[1] - 0.322 * px[2];
                let q = 0.211 * px[0] - 0.523 * px[1] + 0.312 * px[2];
                let (i2, q2) = (i_ * cos - q * sin, i_ * sin + q * cos);
                px = [y + 0.956 * i2 + 0.621 * q2, y - 0.272 * i2 - 0.647 * q2, y - 1.106 * i2 + 1.703 * q2];
            }
            for c in 0..3 {
                fr[c * n + i] = px[c].clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Rank-based matching: the k-th smallest value of each frame channel takes
/// the value of the reference at the same quantile.
pub fn histogram_match(x: &Video, reference: &Video) -> Result<Video> {
    let s = x.shape();
    let rs = reference.shape();
    let m = rs.plane_len();
    let n = s.plane_len();
    let mut refs: Vec<Vec<f32>> = (0..s.channels)
        .map(|c| {
            let rc = if rs.channels == 1 { 0 } else { c.min(rs.channels - 1) };
            reference.plane(0, rc).to_vec()
        })
        .collect();
    for r in &mut refs {
        r.sort_by(f32::total_cmp);
    }
    let mut out = x.clone();
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for f in 0..s.frames {
        for c in 0..s.channels {
            let plane = x.plane(f, c);
            order.clear();
            order.extend(0..n);
            order.sort_by(|&a, &b| plane[a].total_cmp(&plane[b]).then(a.cmp(&b)));
            let dst = &mut out.frame_mut(f)[c * n..(c + 1) * n];
            for (rank, &i) in order.iter().enumerate() {
                let q = ((rank as f64 + 0.5) * m as f64 / n as f64).floor() as usize;
                dst[i] = refs[c][q.min(m - 1)].clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

fn mask_composite(x: &Video, mask: &Video, payload: &Video) -> Video {
    let s = x.shape();
    let n = s.plane_len();
    let mut out = x.clone();
    let ms = mask.shape();
    for f in 0..s.frames {
        let fr = out.frame_mut(f);
        for c in 0..s.channels {
            let pc = c.min(payload.shape().channels - 1);
            for i in 0..n {
                let m = if ms.channels == 1 {
                    mask.plane(0, 0)[i]
                } else {
                    (0..ms.channels).map(|k| mask.plane(0, k)[i]).sum::<f32>() / ms.channels as f32
                }
                .clamp(0.0, 1.0);
                let p = payload.plane(0, pc)[i];
                fr[c * n + i] = (m * p + (1.0 - m) * fr[c * n + i]).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Mean squared gradient across mask edges: the squared difference between
/// each pair of 4-neighbours whose mask values fall on opposite sides of 0.5.
pub fn boundary_gradient_energy(x: &Video, mask: &Video) -> f64 {
    let s = x.shape();
    let (h, w) = (s.height, s.width);
    let m = |y: usize, xx: usize| mask.plane(0, 0)[y * w + xx] >= 0.5;
    let (mut total, mut count) = (0.0f64, 0usize);
    for f in 0..s.frames {
        for y in 0..h {
            for xx in 0..w {
                for (ny, nx) in [(y, xx + 1), (y + 1, xx)] {
                    if ny >= h || nx >= w || m(y, xx) == m(ny, nx) {
                        continue;
                    }
                    for c in 0..s.channels {
                        let d = (x.at(f, c, y, xx) - x.at(f, c, ny, nx)) as f64;
                        total += d * d;
                    }
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Edits staged on a fork point, one preview and starting latent per branch.
#[derive(Debug, Clone)]
pub struct Staged {
    pub preview_a: PixelVideo,
    pub preview_b: PixelVideo,
    pub start_a: Video,
    pub start_b: Video,
    pub specs: Vec<InterventionSpec>,
    pub renoise: Option<RenoiseMode>,
}

impl Staged {
    /// Nothing applied yet: both previews show the decoded fork estimate.
    pub fn new(trace: &GenerationTrace, codec: &dyn LatentCodec) -> Result<Self> {
        let preview = codec.decode(&trace.fork_clean)?;
        Ok(Self {
            preview_a: preview.clone(),
            preview_b: preview,
            start_a: trace.fork.clone(),
            start_b: trace.fork.clone(),
            specs: Vec::new(),
            renoise: None,
        })
    }

    pub fn is_modified(&self) -> bool {
        !self.specs.is_empty()
    }

    pub fn apply(&mut self, spec: &InterventionSpec, sampler: &ForkSampler<'_>, codec: &dyn LatentCodec) -> Result<()> {
        spec.validate(Some(self.preview_a.shape()))?;
        let cfg = sampler.config();
        let total = cfg.total_steps();
        let fork_t = Timestep(total - cfg.joint_steps);
        let coeff = if cfg.joint_steps == 0 { 1.0 } else { sampler.schedule().alpha_bar_at(fork_t)?.sqrt() as f32 };
        let edit = |preview: &PixelVideo, start: &Video| -> Result<(PixelVideo, Video)> {
            let edited = apply_tau(preview, spec)?;
            let z = match spec.renoise {
                RenoiseMode::Delta => {
                    if edited.bit_eq(preview) {
                        start.clone()
                    } else {
                        let delta = codec.encode(&edited)?.zip_map(&codec.encode(preview)?, |a, b| a - b)?;
                        start.zip_map(&delta, |z, d| z + coeff * d)?
                    }
                }
                RenoiseMode::Fresh { seed } => {
                    let enc = codec.encode(&edited)?;
                    let noise = Video::randn(enc.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
                    if cfg.joint_steps == 0 {
                        noise
                    } else {
                        add_noise(&enc, fork_t, sampler.schedule(), &noise)?
                    }
                }
            };
            Ok((edited, z))
        };
        if spec.branch_scope.touches_a() {
            (self.preview_a, self.start_a) = edit(&self.preview_a, &self.start_a)?;
        }
        if spec.branch_scope.touches_b() {
            (self.preview_b, self.start_b) = edit(&self.preview_b, &self.start_b)?;
        }
        self.specs.push(spec.clone());
        self.renoise = Some(spec.renoise);
        Ok(())
    }

    /// Runs the disjoint phase from the staged latents.
    pub fn finish(&self, sampler: &ForkSampler<'_>, trace: &GenerationTrace) -> Result<MatchPair> {
        let mut prefix = trace.prefix();
        if self.is_modified() {
            prefix.fork_a = Some(self.start_a.clone());
            prefix.fork_b = Some(self.start_b.clone());
            prefix.intervention = Some(InterventionRecord {
                specs: self.specs.iter().map(serde_json::to_value).collect::<std::result::Result<_, _>>()?,
                renoise: self.renoise.unwrap_or(RenoiseMode::Delta),
            });
        }
        sampler.finish_from_fork(prefix, &self.start_a, &self.start_b)
    }
}

/// Applies `spec` at the fork point of `trace` and resumes both branches.
pub fn inject(trace: &GenerationTrace, spec: &InterventionSpec, sampler: &ForkSampler<'_>, codec: &dyn LatentCodec) -> Result<MatchPair> {
    if trace.config != *sampler.config() {
        return Err(Error::invalid("trace", "trace was produced with a different configuration"));
    }
    if trace.joint_records().count() != trace.config.joint_steps {
        return Err(Error::Missing("fork checkpoint in trace".into()));
    }
    let mut staged = Staged::new(trace, codec)?;
    staged.apply(spec, sampler, codec)?;
    staged.finish(sampler, trace)
}
