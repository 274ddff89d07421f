//! Latent codecs: the exact identity codec and a small learned autoencoder.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tensors, write_tensors};
use crate::nn::{export_params, import_params, join, patchify, silu, silu_backward, unpatchify, zero_grads, AdamW, Linear, Module, Param, Patch};
use crate::toydata::{render_scene, SceneDistribution};
use crate::video::{LatentVideo, PixelVideo, Video, VideoShape};

pub trait LatentCodec: Send + Sync {
    fn encode(&self, x: &PixelVideo) -> Result<LatentVideo>;
    fn decode(&self, z: &LatentVideo) -> Result<PixelVideo>;
    /// Downscale factors (temporal, spatial).
    fn factors(&self) -> (usize, usize);
    fn latent_channels(&self) -> usize;
    /// Declared bound on the mean absolute roundtrip error for in-range videos.
    fn tolerance(&self) -> f32;
    fn name(&self) -> String;

    fn latent_shape(&self, pixel: VideoShape) -> Result<VideoShape> {
        let (tf, sf) = self.factors();
        if !pixel.frames.is_multiple_of(tf) || !pixel.height.is_multiple_of(sf) || !pixel.width.is_multiple_of(sf) {
            return Err(Error::invalid("shape", format!("{pixel} is not divisible by codec factors ({tf}, {sf})")));
        }
        Ok(VideoShape::new(pixel.frames / tf, self.latent_channels(), pixel.height / sf, pixel.width / sf))
    }
}

/// Which codec a configuration binds.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodecChoice {
    /// Diffusion runs directly on RGB pixels.
    #[default]
    Identity,
    /// Learned codec stored in a directory written by [`ConvCodec::save`].
    Conv { dir: PathBuf },
}

/// Pixel-space diffusion: encode and decode return their input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec {
    pub channels: usize,
}

impl IdentityCodec {
    pub fn rgb() -> Self {
        Self { channels: 3 }
    }
}

impl LatentCodec for IdentityCodec {
    fn encode(&self, x: &PixelVideo) -> Result<LatentVideo> {
        Ok(x.clone())
    }
    fn decode(&self, z: &LatentVideo) -> Result<PixelVideo> {
        Ok(z.clone())
    }
    fn factors(&self) -> (usize, usize) {
        (1, 1)
    }
    fn latent_channels(&self) -> usize {
        self.channels
    }
    fn tolerance(&self) -> f32 {
        0.0
    }
    fn name(&self) -> String {
        "identity".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvCodecConfig {
    pub spatial_factor: usize,
    pub latent_channels: usize,
    pub hidden: usize,
}

impl Default for ConvCodecConfig {
    fn default() -> Self {
        Self { spatial_factor: 2, latent_channels: 4, hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_frames: usize,
    pub lr: f32,
    pub eval_clips: usize,
    /// Declared tolerance = measured held-out error times this margin.
    pub tolerance_margin: f32,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { seed: 0, steps: 1500, batch_frames: 16, lr: 3e-3, eval_clips: 10, tolerance_margin: 1.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecManifest {
    pub config: ConvCodecConfig,
    pub train: CodecTrainConfig,
    pub final_loss: f32,
    pub heldout_mae: f32,
    pub tolerance: f32,
    /// Per-channel latent normalisation applied after encoding.
    pub latent_shift: Vec<f32>,
    pub latent_scale: Vec<f32>,
}

/// Per-tubelet MLP autoencoder (equivalent to strided convolutions with
/// kernel = stride). Latents are normalised to roughly unit variance.
#[derive(Debug, Clone)]
pub struct ConvCodec {
    config: ConvCodecConfig,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    shift: Vec<f32>,
    scale: Vec<f32>,
    tolerance: f32,
}

impl Module for ConvCodec {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.enc1.visit(&join(prefix, "enc1"), f);
        self.enc2.visit(&join(prefix, "enc2"), f);
        self.dec1.visit(&join(prefix, "dec1"), f);
        self.dec2.visit(&join(prefix, "dec2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.enc1.visit_mut(&join(prefix, "enc1"), f);
        self.enc2.visit_mut(&join(prefix, "enc2"), f);
        self.dec1.visit_mut(&join(prefix, "dec1"), f);
        self.dec2.visit_mut(&join(prefix, "dec2"), f);
    }
}

const LATENT_PATCH: Patch = Patch { frames: 1, height: 1, width: 1 };

impl ConvCodec {
    pub fn new(config: ConvCodecConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Self::patch_of(&config).features(3);
        let (h, l) = (config.hidden, config.latent_channels);
        Self {
            enc1: Linear::new(p, h, &mut rng),
            enc2: Linear::new(h, l, &mut rng),
            dec1: Linear::new(l, h, &mut rng),
            dec2: Linear::new(h, p, &mut rng),
            shift: vec![0.0; l],
            scale: vec![1.0; l],
            tolerance: f32::INFINITY,
            config,
        }
    }

    fn patch_of(c: &ConvCodecConfig) -> Patch {
        Patch { frames: 1, height: c.spatial_factor, width: c.spatial_factor }
    }

    fn raw_encode(&self, x: &PixelVideo) -> Result<Vec<f32>> {
        if x.shape().channels != 3 {
            return Err(Error::invalid("channels", format!("codec expects RGB, got {}", x.shape())));
        }
        let tokens = patchify(x, Self::patch_of(&self.config))?;
        Ok(self.enc2.forward(&silu(&self.enc1.forward(&tokens))))
    }

    fn raw_decode(&self, latent_tokens: &[f32], pixel: VideoShape) -> Result<PixelVideo> {
        let out = self.dec2.forward(&silu(&self.dec1.forward(latent_tokens)));
        unpatchify(&out, pixel, Self::patch_of(&self.config))
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("codec.json")
    }

    pub fn save(&self, dir: &Path, manifest: &CodecManifest) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_tensors(&dir.join("codec.mctc"), &export_params(self, ""))?;
        std::fs::write(Self::manifest_path(dir), serde_json::to_vec_pretty(manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CodecManifest = serde_json::from_slice(&std::fs::read(Self::manifest_path(dir))?)?;
        let mut codec = Self::new(manifest.config.clone(), 0);
        import_params(&mut codec, "", &read_tensors(&dir.join("codec.mctc"))?)?;
        codec.shift = manifest.latent_shift;
        codec.scale = manifest.latent_scale;
        codec.tolerance = manifest.tolerance;
        Ok(codec)
    }

    /// Trains on random frames of toy clips and measures the held-out roundtrip error.
    pub fn train(config: ConvCodecConfig, tc: &CodecTrainConfig, dist: &SceneDistribution) -> Result<(Self, CodecManifest)> {
        let mut codec = Self::new(config.clone(), tc.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x00c0_dec0);
        let mut opt = AdamW::new(tc.lr);
        let frame_shape = VideoShape::new(tc.batch_frames, 3, dist.height, dist.width);
        let mut last = f32::NAN;
        for step in 0..tc.steps {
            let mut batch = Video::zeros(frame_shape);
            for i in 0..tc.batch_frames {
                let scene = dist.sample_any(&mut rng);
                let clip = render_scene(&scene)?;
                let f = rng.random_range(0..clip.shape().frames);
                batch.frame_mut(i).copy_from_slice(clip.frame(f));
            }
            let patch = Self::patch_of(&config);
            let tokens = patchify(&batch, patch)?;
            let h1 = codec.enc1.forward(&tokens);
            let a1 = silu(&h1);
            let lat = codec.enc2.forward(&a1);
            let h2 = codec.dec1.forward(&lat);
            let a2 = silu(&h2);
            let out = codec.dec2.forward(&a2);
            let n = out.len() as f32;
            let mut loss = 0.0f64;
            let dout: Vec<f32> = out
                .iter()
                .zip(&tokens)
                .map(|(o, t)| {
                    loss += ((o - t) * (o - t)) as f64;
                    2.0 * (o - t) / n
                })
                .collect();
            last = (loss / n as f64) as f32;
            if !last.is_finite() {
                return Err(Error::Diverged { step, detail: "codec reconstruction loss is not finite".into() });
            }
            zero_grads(&mut codec);
            let da2 = codec.dec2.backward(&a2, &dout);
            let dlat = codec.dec1.backward(&lat, &silu_backward(&h2, &da2));
            let da1 = codec.enc2.backward(&a1, &dlat);
            codec.enc1.backward(&tokens, &silu_backward(&h1, &da1));
            opt.step(&mut codec);
        }

        // Latent statistics and held-out error on fresh clips.
        let mut eval_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xe7a1);
        let l = config.latent_channels;
        let (mut sum, mut sq, mut count) = (vec![0.0f64; l], vec![0.0f64; l], 0usize);
        let mut clips = Vec::new();
        for _ in 0..tc.eval_clips.max(1) {
            let clip = render_scene(&dist.sample_any(&mut eval_rng))?;
            for row in codec.raw_encode(&clip)?.chunks(l) {
                for c in 0..l {
                    sum[c] += row[c] as f64;
                    sq[c] += (row[c] as f64).powi(2);
                }
                count += 1;
            }
            clips.push(clip);
        }
        codec.shift = (0..l).map(|c| (sum[c] / count as f64) as f32).collect();
        codec.scale = (0..l)
            .map(|c| {
                let mean = sum[c] / count as f64;
                ((sq[c] / count as f64 - mean * mean).max(1e-8).sqrt()) as f32
            })
            .collect();
        let mut mae = 0.0f64;
        for clip in &clips {
            let back = codec.decode(&codec.encode(clip)?)?;
            mae += back.data().iter().zip(clip.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / clip.data().len() as f64;
        }
        let heldout_mae = (mae / clips.len() as f64) as f32;
        codec.tolerance = heldout_mae * tc.tolerance_margin;
        let manifest = CodecManifest {
            config,
            train: tc.clone(),
            final_loss: last,
            heldout_mae,
            tolerance: codec.tolerance,
            latent_shift: codec.shift.clone(),
            latent_scale: codec.scale.clone(),
        };
        Ok((codec, manifest))
    }
}

impl LatentCodec for ConvCodec {
    fn encode(&self, x: &PixelVideo) -> Result<LatentVideo> {
        let shape = self.latent_shape(x.shape())?;
        let mut raw = self.raw_encode(x)?;
        let l = self.config.latent_channels;
        for row in raw.chunks_mut(l) {
            for c in 0..l {
                row[c] = (row[c] - self.shift[c]) / self.scale[c];
            }
        }
        unpatchify(&raw, shape, LATENT_PATCH)
    }

    fn decode(&self, z: &LatentVideo) -> Result<PixelVideo> {
        let s = z.shape();
        if s.channels != self.config.latent_channels {
            return Err(Error::invalid("channels", format!("codec latents have {} channels, got {s}", self.config.latent_channels)));
        }
        let f = self.config.spatial_factor;
        let mut tokens = patchify(z, LATENT_PATCH)?;
        let l = self.config.latent_channels;
        for row in tokens.chunks_mut(l) {
            for c in 0..l {
                row[c] = row[c] * self.scale[c] + self.shift[c];
            }
        }
        self.raw_decode(&tokens, VideoShape::new(s.frames, 3, s.height * f, s.width * f))
    }

    fn factors(&self) -> (usize, usize) {
        (1, self.config.spatial_factor)
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn tolerance(&self) -> f32 {
        self.tolerance
    }

    fn name(&self) -> String {
        "conv".into()
    }
}
