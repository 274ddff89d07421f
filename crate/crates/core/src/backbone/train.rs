//! Denoising score-matching training for the toy backbone.
//!
//! Each step draws clips from the dataset, a uniform timestep `t` in `1..=T`
//! and Gaussian noise, forms `z_t = sqrt(ab_t) x + sqrt(1 - ab_t) eps`, and
//! regresses `eps` with mean squared error. The class label is replaced by the
//! null token with probability `null_probability` so the same network also
//! provides the unconditional estimate for guidance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::codec::LatentCodec;
use crate::backbone::net::{DenoiserNet, NetCache, NetConfig, NetInput};
use crate::backbone::toy::ToyBackbone;
use crate::error::{Error, Result};
use crate::nn::{param_count, zero_grads, AdamW};
use crate::schedule::{build_schedule, NoiseSchedule, ScheduleSpec, Timestep};
use crate::toydata::{render_scene, SceneDistribution, ToyDataset};
use crate::video::Video;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup: usize,
    /// Learning rate at the end of the cosine decay, as a fraction of `lr`.
    pub final_lr_fraction: f32,
    pub null_probability: f64,
    pub validation_clips: usize,
    pub log_every: usize,
    pub net: NetConfig,
    pub schedule: ScheduleSpec,
    /// Distribution the held-out validation clips are drawn from.
    pub scenes: SceneDistribution,
    #[serde(default)]
    pub loss_weight: LossWeight,
}

/// Per-sample weight on the noise-prediction error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeight {
    /// Plain noise MSE.
    #[default]
    Uniform,
    /// `1 / alpha_bar_t`: the velocity-prediction loss, which puts more weight
    /// on the high-noise steps that settle layout and class.
    Velocity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 3000,
            batch: 8,
            lr: 2e-3,
            warmup: 100,
            final_lr_fraction: 0.05,
            null_probability: 0.1,
            validation_clips: 48,
            log_every: 50,
            net: NetConfig::default(),
            schedule: ScheduleSpec::default(),
            scenes: SceneDistribution::default(),
            loss_weight: LossWeight::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    /// Mean (weighted) training loss over the steps since the previous point.
    pub loss: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub version: u32,
    pub config: TrainConfig,
    pub dataset_len: usize,
    pub param_count: usize,
    pub codec: String,
    pub losses: Vec<LossPoint>,
    pub final_loss: f32,
    /// Held-out loss with timesteps spread evenly over `1..=T`.
    pub val_loss: f32,
    /// Held-out loss of always predicting zero noise on the same samples.
    pub zero_baseline_val_loss: f32,
    /// Held-out loss at `t = 1` only.
    pub val_loss_t1: f32,
}

/// A fixed held-out set of `(clip, class, t, eps)` samples.
struct Validation {
    items: Vec<(Video, usize, usize, Video)>,
}

impl Validation {
    fn new(cfg: &TrainConfig, codec: &dyn LatentCodec, t_override: Option<usize>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a11);
        let mut items = Vec::with_capacity(cfg.validation_clips);
        for i in 0..cfg.validation_clips {
            let scene = cfg.scenes.sample_any(&mut rng);
            let x = codec.encode(&render_scene(&scene)?)?;
            let t = t_override.unwrap_or(1 + (i * cfg.schedule.num_steps) / cfg.validation_clips.max(1));
            let eps = Video::randn(x.shape(), &mut rng);
            items.push((x, scene.class_id as usize, t, eps));
        }
        Ok(Self { items })
    }

    /// `(model loss, zero-predictor loss)`.
    fn evaluate(&self, net: &DenoiserNet, sched: &NoiseSchedule) -> Result<(f32, f32)> {
        let (mut model, mut zero, mut n) = (0.0f64, 0.0f64, 0usize);
        let steps = sched.num_steps();
        for (x, class, t, eps) in &self.items {
            let z = noised(x, eps, sched.alpha_bar_at(Timestep(*t))?);
            let pred = net.forward(&[NetInput { video: &z, class_index: *class, time: *t as f32 / steps as f32 }], None)?;
            model += pred[0].data().iter().zip(eps.data()).map(|(p, e)| ((p - e) as f64).powi(2)).sum::<f64>();
            zero += eps.data().iter().map(|&e| (e as f64).powi(2)).sum::<f64>();
            n += eps.data().len();
        }
        Ok(((model / n as f64) as f32, (zero / n as f64) as f32))
    }
}

fn noised(x: &Video, eps: &Video, alpha_bar: f64) -> Video {
    let (a, b) = (alpha_bar.sqrt() as f32, (1.0 - alpha_bar).sqrt() as f32);
    x.zip_map(eps, |x, e| a * x + b * e).expect("same shape")
}

fn learning_rate(cfg: &TrainConfig, step: usize) -> f32 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f32 / cfg.warmup as f32;
    }
    let span = (cfg.steps - cfg.warmup).max(1) as f32;
    let progress = (step - cfg.warmup) as f32 / span;
    let floor = cfg.final_lr_fraction;
    cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos()))
}

/// Trains a toy backbone on `dataset`. `on_log` is called at every loss point.
pub fn train_toy_backbone(
    dataset: &ToyDataset,
    cfg: &TrainConfig,
    codec: &dyn LatentCodec,
    on_log: &mut dyn FnMut(&LossPoint),
) -> Result<ToyBackbone> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "empty"));
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::invalid("steps", "steps and batch must be positive"));
    }
    if cfg.net.channels != codec.latent_channels() {
        return Err(Error::invalid(
            "net.channels",
            format!("{} does not match the codec's {} latent channels", cfg.net.channels, codec.latent_channels()),
        ));
    }
    let sched = build_schedule(&cfg.schedule)?;
    let steps_t = sched.num_steps();
    let mut net = DenoiserNet::new(cfg.net.clone(), cfg.seed);
    let mut opt = AdamW::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut losses = Vec::new();
    let (mut window, mut window_n, mut last) = (0.0f64, 0usize, f32::NAN);
    let mut cache = NetCache::default();

    for step in 0..cfg.steps {
        let mut clips = Vec::with_capacity(cfg.batch);
        let mut eps = Vec::with_capacity(cfg.batch);
        let mut meta = Vec::with_capacity(cfg.batch);
        let mut weights = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let scene = &dataset.scenes[rng.random_range(0..dataset.len())];
            let x = codec.encode(&render_scene(scene)?)?;
            let t = rng.random_range(1..=steps_t);
            let e = Video::randn(x.shape(), &mut rng);
            let class = if rng.random_bool(cfg.null_probability) { net.null_index() } else { scene.class_id as usize };
            clips.push(noised(&x, &e, sched.alpha_bar_at(Timestep(t))?));
            eps.push(e);
            meta.push((class, t as f32 / steps_t as f32));
            weights.push(match cfg.loss_weight {
                LossWeight::Uniform => 1.0,
                LossWeight::Velocity => (1.0 / sched.alpha_bar_at(Timestep(t))?) as f32,
            });
        }
        let inputs: Vec<NetInput<'_>> =
            clips.iter().zip(&meta).map(|(v, &(class_index, time))| NetInput { video: v, class_index, time }).collect();
        let preds = net.forward(&inputs, Some(&mut cache))?;

        let n = (preds.len() * preds[0].data().len()) as f32;
        let mut loss = 0.0f64;
        let mut grads = Vec::with_capacity(preds.len());
        for ((p, e), &w) in preds.iter().zip(&eps).zip(&weights) {
            loss += w as f64 * p.data().iter().zip(e.data()).map(|(p, e)| ((p - e) as f64).powi(2)).sum::<f64>();
            grads.push(p.zip_map(e, |p, e| 2.0 * w * (p - e) / n)?);
        }
        let loss = (loss / n as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss}; last finite loss {last}; lr {}", learning_rate(cfg, step)),
            });
        }
        last = loss;
        zero_grads(&mut net);
        net.backward(&cache, &grads)?;
        opt.lr = learning_rate(cfg, step);
        let gnorm = opt.step(&mut net);
        if !gnorm.is_finite() {
            return Err(Error::Diverged { step, detail: format!("gradient norm {gnorm} at loss {loss}") });
        }
        window += loss as f64;
        window_n += 1;
        if (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            let point = LossPoint { step: step + 1, loss: (window / window_n as f64) as f32 };
            on_log(&point);
            losses.push(point);
            window = 0.0;
            window_n = 0;
        }
    }

    let (val_loss, zero_baseline_val_loss) = Validation::new(cfg, codec, None)?.evaluate(&net, &sched)?;
    let (val_loss_t1, _) = Validation::new(cfg, codec, Some(1))?.evaluate(&net, &sched)?;
    let manifest = TrainManifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        dataset_len: dataset.len(),
        param_count: param_count(&net),
        codec: codec.name(),
        losses,
        final_loss: last,
        val_loss,
        zero_baseline_val_loss,
        val_loss_t1,
    };
    Ok(ToyBackbone::new(net, cfg.schedule).with_manifest(manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::codec::IdentityCodec;
    use crate::nn::Patch;

    fn tiny() -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch: 2,
            warmup: 2,
            validation_clips: 2,
            log_every: 3,
            net: NetConfig {
                patch: Patch { frames: 2, height: 4, width: 4 },
                dim: 16,
                hidden: 32,
                cond_dim: 16,
                dilations: vec![1, 2],
                ..NetConfig::default()
            },
            scenes: SceneDistribution { frame_count: 4, height: 16, width: 16, ..Default::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoke_run_writes_manifest() {
        let cfg = tiny();
        let data = ToyDataset::generate(8, 1, &cfg.scenes);
        let mut logged = 0;
        let b = train_toy_backbone(&data, &cfg, &IdentityCodec::rgb(), &mut |_| logged += 1).unwrap();
        assert_eq!(logged, 2);
        let m = b.manifest().unwrap();
        assert!(m.final_loss.is_finite() && m.val_loss.is_finite());
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let back = ToyBackbone::load(dir.path()).unwrap();
        assert_eq!(back.manifest(), b.manifest());
    }

    #[test]
    fn same_seed_same_final_loss() {
        let cfg = tiny();
        let data = ToyDataset::generate(8, 1, &cfg.scenes);
        let a = train_toy_backbone(&data, &cfg, &IdentityCodec::rgb(), &mut |_| {}).unwrap();
        let b = train_toy_backbone(&data, &cfg, &IdentityCodec::rgb(), &mut |_| {}).unwrap();
        assert_eq!(a.manifest().unwrap().final_loss.to_bits(), b.manifest().unwrap().final_loss.to_bits());
    }

    #[test]
    fn divergence_aborts_with_step() {
        let mut cfg = tiny();
        cfg.lr = f32::INFINITY;
        cfg.warmup = 0;
        let data = ToyDataset::generate(4, 1, &cfg.scenes);
        let err = train_toy_backbone(&data, &cfg, &IdentityCodec::rgb(), &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn rejects_empty_dataset_and_channel_mismatch() {
        let cfg = tiny();
        let empty = ToyDataset { scenes: vec![] };
        assert!(train_toy_backbone(&empty, &cfg, &IdentityCodec::rgb(), &mut |_| {}).is_err());
        let data = ToyDataset::generate(2, 1, &cfg.scenes);
        let err = train_toy_backbone(&data, &cfg, &IdentityCodec { channels: 4 }, &mut |_| {}).unwrap_err();
        assert_eq!(err.field(), Some("net.channels"));
    }
}
