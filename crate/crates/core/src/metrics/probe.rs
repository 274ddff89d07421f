//! Prompt adherence.
//!
//! For toy-class prompts the scorer is a small frame classifier trained on
//! rendered scenes. A video's score for class `c` is the classifier's
//! probability of `c` averaged over frames. Training applies the same kinds
//! of colour edits the intervention module offers, so a recoloured scene
//! still scores as its class. Frames without an object (bare backgrounds and
//! pixel noise) are trained towards the uniform distribution.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::net::{Block, BlockCache};
use crate::backbone::{PromptKind, PromptSpec};
use crate::error::{Error, Result};
use crate::intervene::{apply_tau, ImageRef, InterventionSpec, Transform};
use crate::io::{decode_tensors, read_tensors, write_tensors};
use crate::nn::{export_params, import_params, join, patchify, zero_grads, AdamW, GridShape, LayerNorm, Linear, Module, Param, Patch};
use crate::toydata::{render_scene, SceneDistribution, NUM_CLASSES};
use crate::video::{PixelVideo, Video, VideoShape};

const WEIGHTS_FILE: &str = "probe.mctc";
const MANIFEST_FILE: &str = "manifest.json";

static BUNDLED_WEIGHTS: &[u8] = include_bytes!("../../assets/adherence-probe/probe.mctc");
static BUNDLED_MANIFEST: &str = include_str!("../../assets/adherence-probe/manifest.json");

pub trait AdherenceScorer: Send + Sync {
    /// Score in `[0, 1]`.
    fn score(&self, x: &PixelVideo, prompt: &PromptSpec) -> Result<f64>;
    fn name(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub patch: Patch,
    pub dim: usize,
    pub hidden: usize,
    pub dilations: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { patch: Patch { frames: 1, height: 4, width: 4 }, dim: 32, hidden: 64, dilations: vec![1, 2], num_classes: NUM_CLASSES }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub clips_per_class: usize,
    pub validation_clips_per_class: usize,
    /// Fraction of each batch that is object-free with a uniform target.
    pub blank_fraction: f64,
    pub net: ProbeConfig,
    pub scenes: SceneDistribution,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            steps: 800,
            batch: 32,
            lr: 3e-3,
            clips_per_class: 80,
            validation_clips_per_class: 20,
            blank_fraction: 0.2,
            net: ProbeConfig::default(),
            scenes: SceneDistribution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeManifest {
    pub version: u32,
    pub config: ProbeTrainConfig,
    pub final_loss: f64,
    /// Frame accuracy on held-out clips.
    pub val_accuracy: f64,
    /// Mean score of held-out clips against their own class.
    pub val_correct_score: f64,
    /// Largest mean score of held-out clips against a class other than their own.
    pub val_wrong_score: f64,
    /// Largest mean deviation from `1 / num_classes` on uniform-noise clips.
    pub noise_prior_deviation: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeNet {
    config: ProbeConfig,
    embed: Linear,
    blocks: Vec<Block>,
    head: Linear,
}

struct ProbeCache {
    tokens: Vec<f32>,
    blocks: Vec<BlockCache>,
    ln: LayerNorm,
    pooled: Vec<f32>,
}

impl ProbeNet {
    pub fn new(config: ProbeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = config.patch.features(3);
        let embed = Linear::new(feat, config.dim, &mut rng);
        let blocks = config.dilations.iter().map(|&d| Block::new(config.dim, config.hidden, d, &mut rng)).collect();
        let head = Linear::new(config.dim, config.num_classes, &mut rng);
        Self { config, embed, blocks, head }
    }

    fn grid(&self, shape: VideoShape) -> Result<GridShape> {
        if shape.channels != 3 {
            return Err(Error::invalid("channels", format!("probe needs RGB frames, got {} channels", shape.channels)));
        }
        self.config.patch.check(shape)?;
        let (_, rows, cols) = self.config.patch.grid(shape);
        Ok(GridShape { batch: shape.frames, frames: 1, rows, cols })
    }

    /// Per-frame logits `[frames, classes]`.
    fn logits(&self, v: &Video, cache: Option<&mut ProbeCache>) -> Result<Vec<f32>> {
        let grid = self.grid(v.shape())?;
        let tokens = patchify(v, self.config.patch)?;
        let mut h = self.embed.forward(&tokens);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let keep = cache.is_some();
        for b in &self.blocks {
            let mut c = BlockCache::default();
            h = b.forward(&h, None, grid, keep.then_some(&mut c));
            caches.push(c);
        }
        let dim = self.config.dim;
        let mut ln = LayerNorm::default();
        let n = ln.forward(&h, dim);
        let per = grid.tokens_per_item();
        let mut pooled = vec![0.0f32; grid.batch * dim];
        for (i, row) in n.chunks(dim).enumerate() {
            let dst = &mut pooled[(i / per) * dim..(i / per + 1) * dim];
            for (d, v) in dst.iter_mut().zip(row) {
                *d += v / per as f32;
            }
        }
        let out = self.head.forward(&pooled);
        if let Some(c) = cache {
            *c = ProbeCache { tokens, blocks: caches, ln, pooled };
        }
        Ok(out)
    }

    fn backward(&mut self, cache: &ProbeCache, dlogits: &[f32], grid: GridShape) {
        let dim = self.config.dim;
        let dpooled = self.head.backward(&cache.pooled, dlogits);
        let per = grid.tokens_per_item();
        let mut dn = vec![0.0f32; grid.batch * per * dim];
        for (i, row) in dn.chunks_mut(dim).enumerate() {
            for (d, g) in row.iter_mut().zip(&dpooled[(i / per) * dim..(i / per + 1) * dim]) {
                *d = g / per as f32;
            }
        }
        let mut dh = cache.ln.backward(&dn, dim);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dh = b.backward(c, &dh, None, grid).0;
        }
        self.embed.backward(&cache.tokens, &dh);
    }

    /// Per-frame class probabilities `[frames][classes]`; inputs are clamped to `[0, 1]`.
    pub fn probabilities(&self, v: &Video) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(&v.clamp01(), None)?;
        Ok(logits.chunks(self.config.num_classes).map(softmax).collect())
    }
}

fn softmax(l: &[f32]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = l.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Module for ProbeNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// A trained frame classifier and its training record.
#[derive(Debug, Clone)]
pub struct AdherenceProbe {
    net: ProbeNet,
    manifest: Option<ProbeManifest>,
}

impl AdherenceProbe {
    /// An untrained probe; scoring with it is an error.
    pub fn untrained(config: ProbeConfig) -> Self {
        Self { net: ProbeNet::new(config, 0), manifest: None }
    }

    pub fn manifest(&self) -> Option<&ProbeManifest> {
        self.manifest.as_ref()
    }

    pub fn net(&self) -> &ProbeNet {
        &self.net
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = self.manifest.as_ref().ok_or_else(|| Error::Missing("probe training manifest".into()))?;
        std::fs::create_dir_all(dir)?;
        write_tensors(&dir.join(WEIGHTS_FILE), &export_params(&self.net, ""))?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: ProbeManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        Self::from_parts(manifest, &read_tensors(&dir.join(WEIGHTS_FILE))?)
    }

    pub fn bundled() -> Result<Self> {
        let manifest: ProbeManifest = serde_json::from_str(BUNDLED_MANIFEST)?;
        Self::from_parts(manifest, &decode_tensors(BUNDLED_WEIGHTS, &PathBuf::from("<bundled probe>"))?)
    }

    fn from_parts(manifest: ProbeManifest, tensors: &[crate::io::NamedTensor]) -> Result<Self> {
        let mut net = ProbeNet::new(manifest.config.net.clone(), 0);
        import_params(&mut net, "", tensors)?;
        Ok(Self { net, manifest: Some(manifest) })
    }
}

impl AdherenceScorer for AdherenceProbe {
    fn score(&self, x: &PixelVideo, prompt: &PromptSpec) -> Result<f64> {
        if self.manifest.is_none() {
            return Err(Error::Missing("trained adherence probe".into()));
        }
        if prompt.kind != PromptKind::ToyClass || prompt.is_null {
            return Err(Error::UnsupportedPrompt(prompt.to_string()));
        }
        let class = prompt.class_id.ok_or_else(|| Error::invalid("class_id", "missing"))? as usize;
        if class >= self.net.config.num_classes {
            return Err(Error::invalid("class_id", format!("{class} >= {}", self.net.config.num_classes)));
        }
        let probs = self.net.probabilities(x)?;
        Ok(probs.iter().map(|p| p[class]).sum::<f64>() / probs.len() as f64)
    }

    fn name(&self) -> &str {
        "toy_probe"
    }
}

fn uniform_noise(shape: VideoShape, rng: &mut ChaCha8Rng) -> Video {
    let data = (0..shape.len()).map(|_| rng.random::<f32>()).collect();
    Video::from_vec(shape, data).expect("length matches shape")
}

/// Random colour edit of a single frame.
fn augment(frame: &Video, pool: &[Video], rng: &mut ChaCha8Rng) -> Result<Video> {
    let mut v = frame.clone();
    if rng.random_bool(0.35) {
        let gamma = rng.random_range(-0.8f32..0.8).exp();
        v = apply_tau(&v, &InterventionSpec::new(Transform::Gamma { gamma }))?;
    }
    if rng.random_bool(0.5) {
        let spec = InterventionSpec {
            seed: rng.random(),
            ..InterventionSpec::new(Transform::ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.4, hue: 0.15 })
        };
        v = apply_tau(&v, &spec)?;
    }
    if rng.random_bool(0.3) {
        let r = &pool[rng.random_range(0..pool.len())];
        let s = r.shape();
        let reference = ImageRef::Inline { channels: s.channels, height: s.height, width: s.width, data: r.data().to_vec() };
        v = apply_tau(&v, &InterventionSpec::new(Transform::HistogramMatch { reference }))?;
    }
    if rng.random_bool(0.3) {
        let mut perm = [0usize, 1, 2];
        perm.shuffle(rng);
        let n = v.shape().plane_len();
        let src = v.clone();
        for (c, &p) in perm.iter().enumerate() {
            v.frame_mut(0)[c * n..(c + 1) * n].copy_from_slice(src.plane(0, p));
        }
    }
    if rng.random_bool(0.5) {
        let sigma = rng.random_range(0.0f32..0.12);
        let noise = Video::randn(v.shape(), rng);
        v = v.zip_map(&noise, |a, e| (a + sigma * e).clamp(0.0, 1.0))?;
    }
    Ok(v)
}

struct Sample {
    frame: Video,
    target: Vec<f32>,
}

/// Trains a probe on freshly rendered scenes and measures it on held-out clips.
pub fn train_probe(cfg: &ProbeTrainConfig, on_log: &mut dyn FnMut(usize, f64)) -> Result<AdherenceProbe> {
    let k = cfg.net.num_classes;
    if k != NUM_CLASSES {
        return Err(Error::invalid("num_classes", format!("toy scenes have {NUM_CLASSES} classes")));
    }
    if cfg.batch == 0 || cfg.clips_per_class == 0 {
        return Err(Error::invalid("batch", "batch and clips_per_class must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let render_set = |count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<(usize, Video)>> {
        let mut out = Vec::new();
        for class in 0..k {
            for _ in 0..count {
                out.push((class, render_scene(&cfg.scenes.sample(class as u32, rng))?));
            }
        }
        Ok(out)
    };
    let train = render_set(cfg.clips_per_class, &mut rng)?;
    let mut backgrounds = Vec::new();
    for _ in 0..cfg.clips_per_class {
        backgrounds.push(cfg.scenes.sample_any(&mut rng).background_frame());
    }
    let frames: Vec<(usize, Video)> = train
        .iter()
        .flat_map(|(c, v)| (0..v.shape().frames).map(move |f| (*c, v.frames_range(f, f + 1).expect("frame in range"))))
        .collect();
    let pool: Vec<Video> = frames.iter().step_by(7).map(|(_, v)| v.clone()).collect();

    let mut net = ProbeNet::new(cfg.net.clone(), rng.random());
    let mut opt = AdamW::new(cfg.lr);
    let uniform = vec![1.0 / k as f32; k];
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let lr_scale = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        opt.lr = cfg.lr * (0.05 + 0.95 * lr_scale) as f32;
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if rng.random_bool(cfg.blank_fraction) {
                let frame = if rng.random_bool(0.5) {
                    backgrounds[rng.random_range(0..backgrounds.len())].clone()
                } else {
                    uniform_noise(frames[0].1.shape(), &mut rng)
                };
                batch.push(Sample { frame: augment(&frame, &pool, &mut rng)?, target: uniform.clone() });
            } else {
                let (class, frame) = &frames[rng.random_range(0..frames.len())];
                let mut target = vec![0.0; k];
                target[*class] = 1.0;
                batch.push(Sample { frame: augment(frame, &pool, &mut rng)?, target });
            }
        }
        let refs: Vec<&Video> = batch.iter().map(|s| &s.frame).collect();
        let input = Video::concat_frames(&refs)?;
        let grid = net.grid(input.shape())?;
        let mut cache = ProbeCache { tokens: Vec::new(), blocks: Vec::new(), ln: LayerNorm::default(), pooled: Vec::new() };
        let logits = net.logits(&input, Some(&mut cache))?;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0f32; logits.len()];
        for (i, (l, s)) in logits.chunks(k).zip(&batch).enumerate() {
            let p = softmax(l);
            for c in 0..k {
                loss -= s.target[c] as f64 * p[c].max(1e-12).ln();
                dlogits[i * k + c] = (p[c] as f32 - s.target[c]) / cfg.batch as f32;
            }
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, detail: format!("probe loss {loss}") });
        }
        zero_grads(&mut net);
        net.backward(&cache, &dlogits, grid);
        opt.step(&mut net);
        final_loss = loss;
        if (step + 1) % 50 == 0 {
            on_log(step + 1, loss);
        }
    }

    let val = render_set(cfg.validation_clips_per_class, &mut rng)?;
    let (mut correct, mut total) = (0usize, 0usize);
    let mut own = 0.0;
    let mut wrong = vec![vec![0.0; k]; k];
    let mut counts = vec![0usize; k];
    for (class, v) in &val {
        let probs = net.probabilities(v)?;
        for p in &probs {
            let arg = (0..k).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
            correct += usize::from(arg == *class);
            total += 1;
        }
        let mean: Vec<f64> = (0..k).map(|c| probs.iter().map(|p| p[c]).sum::<f64>() / probs.len() as f64).collect();
        own += mean[*class];
        for c in 0..k {
            wrong[*class][c] += mean[c];
        }
        counts[*class] += 1;
    }
    let mut val_wrong_score: f64 = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                val_wrong_score = val_wrong_score.max(wrong[a][b] / counts[a] as f64);
            }
        }
    }
    let mut deviation = 0.0f64;
    let noise_clips = 10;
    for _ in 0..noise_clips {
        let probs = net.probabilities(&uniform_noise(val[0].1.shape(), &mut rng))?;
        for c in 0..k {
            let m = probs.iter().map(|p| p[c]).sum::<f64>() / probs.len() as f64;
            deviation = deviation.max((m - 1.0 / k as f64).abs());
        }
    }
    let manifest = ProbeManifest {
        version: 1,
        config: cfg.clone(),
        final_loss,
        val_accuracy: correct as f64 / total as f64,
        val_correct_score: own / val.len() as f64,
        val_wrong_score,
        noise_prior_deviation: deviation,
    };
    Ok(AdherenceProbe { net, manifest: Some(manifest) })
}
