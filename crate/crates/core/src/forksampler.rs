//! Joint-then-disjoint sampling of a prompt pair.
//!
//! The joint phase runs the first `K` iterations (t = T down to T-K+1) on a
//! single latent whose noise estimate combines the two prompts' guided
//! estimates. The disjoint phase continues each prompt on its own branch from
//! the shared fork latent `z_{T-K}`. Iteration `i` (1-based) denoises
//! `t = T - i + 1`, so `iter_index` in [`combine_linear_decay`] equals the
//! number of iterations completed once the current one finishes.
//!
//! Path noise for stochastic schedules is drawn per step from a generator
//! seeded by hashing `(seed_path, branch tag, t)`, so each branch and step is
//! independent but reproducible regardless of where sampling starts.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    apply_guidance, guided_denoise, load_backbone, load_codec, BackboneChoice, CodecChoice, Concurrency, Denoiser,
    GuidanceConfig, LatentCodec, PromptSpec,
};
use crate::error::{Error, Result};
use crate::io::{read_tensors, write_tensors, NamedTensor};
use crate::schedule::{build_schedule, clean_estimate, ddim_step, NoiseSchedule, ScheduleSpec, Timestep};
use crate::toydata::{DEFAULT_FRAMES, DEFAULT_SIZE};
use crate::video::{LatentVideo, PixelVideo, Video, VideoShape};

/// The joint-phase combination `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// `f(a, b) = (a + b) / 2`, then fully independent branches.
    #[default]
    Average,
    /// Average up to the fork, then each branch mixes in the other branch's
    /// estimate with a weight decaying linearly to zero at the last step.
    LinearDecay,
}

/// Where guidance is applied relative to the joint combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgPlacement {
    /// `f(guided_a, guided_b)`.
    #[default]
    PerPromptThenCombine,
    /// `null + s * (f(cond_a, cond_b) - null)`.
    CombineThenGuide,
}

/// Whether the unconditional estimate is computed once per joint step or once per prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullEvaluation {
    #[default]
    Shared,
    PerPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForkConfig {
    pub prompt_a: PromptSpec,
    pub prompt_b: PromptSpec,
    /// Number of joint iterations `K`, in `0..=T`. `T` is `schedule.num_steps`.
    pub joint_steps: usize,
    pub guidance: GuidanceConfig,
    pub combine: CombineMode,
    pub cfg_placement: CfgPlacement,
    pub null_evaluation: NullEvaluation,
    pub schedule: ScheduleSpec,
    pub seed_init: u64,
    pub seed_path: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub codec: CodecChoice,
    pub backbone: BackboneChoice,
}

impl Default for ForkConfig {
    fn default() -> Self {
        Self {
            prompt_a: PromptSpec::toy(0),
            prompt_b: PromptSpec::toy(1),
            joint_steps: 12,
            guidance: GuidanceConfig::default(),
            combine: CombineMode::Average,
            cfg_placement: CfgPlacement::default(),
            null_evaluation: NullEvaluation::default(),
            schedule: ScheduleSpec::default(),
            seed_init: 0,
            seed_path: 0,
            frames: DEFAULT_FRAMES,
            height: DEFAULT_SIZE,
            width: DEFAULT_SIZE,
            codec: CodecChoice::Identity,
            backbone: BackboneChoice::default(),
        }
    }
}

impl ForkConfig {
    pub fn total_steps(&self) -> usize {
        self.schedule.num_steps
    }

    pub fn pixel_shape(&self) -> VideoShape {
        VideoShape::new(self.frames, 3, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        for (name, p) in [("prompt_a", &self.prompt_a), ("prompt_b", &self.prompt_b)] {
            p.validate().map_err(|e| Error::invalid(name, e.to_string()))?;
            if p.is_null {
                return Err(Error::invalid(name, "must not be the null prompt"));
            }
        }
        if self.joint_steps > self.total_steps() {
            return Err(Error::invalid(
                "joint_steps",
                format!("K = {} exceeds T = {}", self.joint_steps, self.total_steps()),
            ));
        }
        self.guidance.validate()?;
        for (name, v) in [("frames", self.frames), ("height", self.height), ("width", self.width)] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// Same configuration with the prompts exchanged.
    pub fn swapped(&self) -> Self {
        let mut c = self.clone();
        std::mem::swap(&mut c.prompt_a, &mut c.prompt_b);
        c
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// `(e1 + e2) / 2`.
pub fn combine_average(e1: &LatentVideo, e2: &LatentVideo) -> Result<LatentVideo> {
    e1.zip_map(e2, |a, b| (a + b) * 0.5)
}

/// Weight on a branch's own estimate after `iter_index` completed iterations.
pub fn linear_decay_weight(iter_index: usize, decay_start: usize, total: usize) -> Result<f32> {
    if decay_start > total {
        return Err(Error::invalid("joint_steps", format!("decay start {decay_start} exceeds T = {total}")));
    }
    if iter_index > total {
        return Err(Error::invalid("iter_index", format!("{iter_index} exceeds T = {total}")));
    }
    if iter_index <= decay_start {
        return Ok(0.5);
    }
    Ok(0.5 + 0.5 * (iter_index - decay_start) as f32 / (total - decay_start) as f32)
}

/// `(w e1 + (1 - w) e2, w e2 + (1 - w) e1)`; both equal the average up to the decay start.
pub fn combine_linear_decay(
    e1: &LatentVideo,
    e2: &LatentVideo,
    iter_index: usize,
    decay_start: usize,
    total: usize,
) -> Result<(LatentVideo, LatentVideo)> {
    let w = linear_decay_weight(iter_index, decay_start, total)?;
    if w == 0.5 {
        let avg = combine_average(e1, e2)?;
        return Ok((avg.clone(), avg));
    }
    if w == 1.0 {
        e1.ensure_same_shape(e2)?;
        return Ok((e1.clone(), e2.clone()));
    }
    Ok((e1.zip_map(e2, |a, b| w * a + (1.0 - w) * b)?, e2.zip_map(e1, |a, b| w * a + (1.0 - w) * b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Joint,
    A,
    B,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Joint => "joint",
            Branch::A => "a",
            Branch::B => "b",
        }
    }
}

/// Standard-normal path noise for one step of one branch.
pub fn path_noise(seed_path: u64, branch: Branch, t: Timestep, shape: VideoShape) -> Video {
    let mut h = Sha256::new();
    h.update(b"matchcut/path-noise/v1");
    h.update(seed_path.to_le_bytes());
    h.update(branch.tag().as_bytes());
    h.update((t.0 as u64).to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    Video::randn(shape, &mut ChaCha8Rng::from_seed(seed))
}

/// Initial latent `z_T`.
pub fn init_latent(seed_init: u64, shape: VideoShape) -> Video {
    Video::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed_init))
}

/// One denoising iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub branch: Branch,
    /// Input latent `z_t`.
    pub latent: Video,
    /// Per-prompt estimates fed to the combination (joint and coupled steps).
    pub eps_a: Option<Video>,
    pub eps_b: Option<Video>,
    /// Noise estimate actually used for the step.
    pub eps: Video,
    /// Unscaled clean estimate `z_0^{(t)}`.
    pub clean: Video,
    /// Path noise, present only when the step is stochastic.
    pub noise: Option<Video>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenoiseMode {
    /// Shift the fork latent by `sqrt(ab_{T-K})` times the encoded edit.
    /// A no-op edit leaves the latent bit-identical.
    Delta,
    /// Replace the fork latent by a forward-process sample of the edited
    /// estimate with fresh noise drawn from the given seed.
    Fresh { seed: u64 },
}

/// Intervention bookkeeping kept in a trace produced by an injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub specs: Vec<serde_json::Value>,
    pub renoise: RenoiseMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub config: ForkConfig,
    pub init: Video,
    pub records: Vec<StepRecord>,
    /// `z_{T-K}`.
    pub fork: Video,
    /// Clean estimate at the fork point (`z_T` itself when `K = 0`).
    pub fork_clean: Video,
    /// Branch starting latents when an intervention changed them.
    pub fork_a: Option<Video>,
    pub fork_b: Option<Video>,
    pub intervention: Option<InterventionRecord>,
    pub final_a: Option<Video>,
    pub final_b: Option<Video>,
}

#[derive(Serialize, Deserialize)]
struct TraceMeta {
    version: u32,
    config: ForkConfig,
    records: Vec<RecordMeta>,
    intervention: Option<InterventionRecord>,
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    t: usize,
    branch: Branch,
    has_eps_pair: bool,
    has_noise: bool,
}

const TRACE_VERSION: u32 = 1;

impl GenerationTrace {
    pub fn joint_records(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(|r| r.branch == Branch::Joint)
    }

    pub fn branch_records(&self, b: Branch) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(move |r| r.branch == b)
    }

    pub fn is_degenerate_fork(&self) -> bool {
        self.config.joint_steps == 0
    }

    /// Trace truncated to the fork point: joint records and fork latents only.
    pub fn prefix(&self) -> GenerationTrace {
        GenerationTrace {
            records: self.joint_records().cloned().collect(),
            fork_a: None,
            fork_b: None,
            intervention: None,
            final_a: None,
            final_b: None,
            ..self.clone()
        }
    }

    /// Writes `trace.json` and `latents.mctc` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut tensors = vec![
            NamedTensor::from_video("init", &self.init),
            NamedTensor::from_video("fork", &self.fork),
            NamedTensor::from_video("fork_clean", &self.fork_clean),
        ];
        for (name, v) in [("fork_a", &self.fork_a), ("fork_b", &self.fork_b), ("final_a", &self.final_a), ("final_b", &self.final_b)] {
            if let Some(v) = v {
                tensors.push(NamedTensor::from_video(name, v));
            }
        }
        let mut metas = Vec::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            tensors.push(NamedTensor::from_video(&format!("rec{i}.latent"), &r.latent));
            tensors.push(NamedTensor::from_video(&format!("rec{i}.eps"), &r.eps));
            tensors.push(NamedTensor::from_video(&format!("rec{i}.clean"), &r.clean));
            let pair = r.eps_a.is_some() && r.eps_b.is_some();
            if let (Some(a), Some(b)) = (&r.eps_a, &r.eps_b) {
                tensors.push(NamedTensor::from_video(&format!("rec{i}.eps_a"), a));
                tensors.push(NamedTensor::from_video(&format!("rec{i}.eps_b"), b));
            }
            if let Some(n) = &r.noise {
                tensors.push(NamedTensor::from_video(&format!("rec{i}.noise"), n));
            }
            metas.push(RecordMeta { t: r.t, branch: r.branch, has_eps_pair: pair, has_noise: r.noise.is_some() });
        }
        write_tensors(&dir.join("latents.mctc"), &tensors)?;
        let meta = TraceMeta {
            version: TRACE_VERSION,
            config: self.config.clone(),
            records: metas,
            intervention: self.intervention.clone(),
        };
        std::fs::write(dir.join("trace.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta: TraceMeta = serde_json::from_slice(&std::fs::read(dir.join("trace.json"))?)?;
        if meta.version != TRACE_VERSION {
            return Err(Error::invalid("version", format!("unsupported trace version {}", meta.version)));
        }
        let tensors = read_tensors(&dir.join("latents.mctc"))?;
        let map: std::collections::HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let get = |name: &str| -> Result<Video> {
            map.get(name).ok_or_else(|| Error::Missing(format!("trace tensor {name}")))?.to_video()
        };
        let opt = |name: &str| -> Result<Option<Video>> { map.get(name).map(|t| t.to_video()).transpose() };
        let mut records = Vec::with_capacity(meta.records.len());
        for (i, m) in meta.records.iter().enumerate() {
            let (eps_a, eps_b) = if m.has_eps_pair {
                (Some(get(&format!("rec{i}.eps_a"))?), Some(get(&format!("rec{i}.eps_b"))?))
            } else {
                (None, None)
            };
            records.push(StepRecord {
                t: m.t,
                branch: m.branch,
                latent: get(&format!("rec{i}.latent"))?,
                eps_a,
                eps_b,
                eps: get(&format!("rec{i}.eps"))?,
                clean: get(&format!("rec{i}.clean"))?,
                noise: if m.has_noise { Some(get(&format!("rec{i}.noise"))?) } else { None },
            });
        }
        Ok(Self {
            config: meta.config,
            init: get("init")?,
            records,
            fork: get("fork")?,
            fork_clean: get("fork_clean")?,
            fork_a: opt("fork_a")?,
            fork_b: opt("fork_b")?,
            intervention: meta.intervention,
            final_a: opt("final_a")?,
            final_b: opt("final_b")?,
        })
    }
}

/// Resolves a configuration's backbone and codec choices.
#[derive(Clone)]
pub struct Engine {
    pub model: Arc<dyn Denoiser>,
    pub codec: Arc<dyn LatentCodec>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Engine({}, {})", self.model.name(), self.codec.name())
    }
}

impl Engine {
    pub fn new(model: Arc<dyn Denoiser>, codec: Arc<dyn LatentCodec>) -> Self {
        Self { model, codec }
    }

    pub fn for_config(cfg: &ForkConfig) -> Result<Self> {
        Ok(Self::new(load_backbone(&cfg.backbone)?, load_codec(&cfg.codec)?))
    }
}

/// A match pair with its trace.
#[derive(Debug, Clone)]
pub struct MatchPair {
    pub x_a: PixelVideo,
    pub x_b: PixelVideo,
    pub trace: GenerationTrace,
}

/// Sampler for one validated configuration.
pub struct ForkSampler<'e> {
    engine: &'e Engine,
    cfg: ForkConfig,
    sched: NoiseSchedule,
    latent_shape: VideoShape,
}

impl<'e> ForkSampler<'e> {
    pub fn new(engine: &'e Engine, cfg: &ForkConfig) -> Result<Self> {
        cfg.validate()?;
        if let Some(trained) = engine.model.schedule() {
            let mut a = *trained;
            let mut b = cfg.schedule;
            a.stochasticity = 0.0;
            b.stochasticity = 0.0;
            if a != b {
                return Err(Error::invalid("schedule", "differs from the schedule the backbone was trained with"));
            }
        }
        let latent_shape = engine.codec.latent_shape(cfg.pixel_shape())?;
        Ok(Self { engine, cfg: cfg.clone(), sched: build_schedule(&cfg.schedule)?, latent_shape })
    }

    pub fn config(&self) -> &ForkConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn latent_shape(&self) -> VideoShape {
        self.latent_shape
    }

    fn total(&self) -> usize {
        self.sched.num_steps()
    }

    fn model(&self) -> &dyn Denoiser {
        self.engine.model.as_ref()
    }

    /// Advances `z` one step at `t` with estimate `eps`, returning `(z_{t-1}, clean, noise)`.
    fn advance(&self, z: &Video, eps: &Video, t: Timestep, branch: Branch, iteration: usize) -> Result<(Video, Video, Option<Video>)> {
        let stochastic = self.sched.sigma_at(t)? != 0.0;
        let noise = stochastic.then(|| path_noise(self.cfg.seed_path, branch, t, z.shape()));
        let zero;
        let noise_ref = match &noise {
            Some(n) => n,
            None => {
                zero = Video::zeros(z.shape());
                &zero
            }
        };
        let next = ddim_step(z, eps, t, &self.sched, noise_ref)?;
        if !next.is_finite() {
            return Err(Error::NonFinite { phase: branch.tag().into(), iteration });
        }
        let clean = clean_estimate(z, eps, t, &self.sched)?;
        Ok((next, clean, noise))
    }

    /// Guided estimates for both prompts and the joint estimate at `z`.
    fn joint_estimate(&self, z: &Video, t: Timestep) -> Result<(Video, Video, Video)> {
        let g = self.cfg.guidance;
        let (pa, pb) = (&self.cfg.prompt_a, &self.cfg.prompt_b);
        let m = self.model();
        match self.cfg.cfg_placement {
            CfgPlacement::PerPromptThenCombine => {
                let (ga, gb) = match self.cfg.null_evaluation {
                    NullEvaluation::PerPrompt => (guided_denoise(m, z, pa, t, g)?, guided_denoise(m, z, pb, t, g)?),
                    NullEvaluation::Shared => {
                        if g.needs_null() {
                            let null = m.denoise(z, &pa.to_null(), t)?;
                            let ca = if g.needs_cond() { m.denoise(z, pa, t)? } else { null.clone() };
                            let cb = if g.needs_cond() { m.denoise(z, pb, t)? } else { null.clone() };
                            (apply_guidance(&null, &ca, g.scale)?, apply_guidance(&null, &cb, g.scale)?)
                        } else {
                            (m.denoise(z, pa, t)?, m.denoise(z, pb, t)?)
                        }
                    }
                };
                let joint = combine_average(&ga, &gb)?;
                Ok((ga, gb, joint))
            }
            CfgPlacement::CombineThenGuide => {
                let ca = m.denoise(z, pa, t)?;
                let cb = m.denoise(z, pb, t)?;
                let cond = combine_average(&ca, &cb)?;
                let joint = if g.needs_null() {
                    let null = m.denoise(z, &pa.to_null(), t)?;
                    apply_guidance(&null, &cond, g.scale)?
                } else {
                    cond
                };
                Ok((ca, cb, joint))
            }
        }
    }

    /// Runs the `K` joint iterations from `z_T`. Returns the fork latent and a
    /// trace holding the joint records.
    pub fn joint_phase(&self) -> Result<(Video, GenerationTrace)> {
        let init = init_latent(self.cfg.seed_init, self.latent_shape);
        let total = self.total();
        let mut z = init.clone();
        let mut records = Vec::with_capacity(self.cfg.joint_steps);
        let mut fork_clean = init.clone();
        for i in 1..=self.cfg.joint_steps {
            let t = Timestep(total - i + 1);
            let (ea, eb, eps) = self.joint_estimate(&z, t)?;
            let (next, clean, noise) = self.advance(&z, &eps, t, Branch::Joint, i)?;
            fork_clean = clean.clone();
            records.push(StepRecord { t: t.0, branch: Branch::Joint, latent: z, eps_a: Some(ea), eps_b: Some(eb), eps, clean, noise });
            z = next;
        }
        let trace = GenerationTrace {
            config: self.cfg.clone(),
            init,
            records,
            fork: z.clone(),
            fork_clean,
            fork_a: None,
            fork_b: None,
            intervention: None,
            final_a: None,
            final_b: None,
        };
        Ok((z, trace))
    }

    /// Denoises one branch from `z_start`, beginning after `start_iter`
    /// completed iterations, under a single prompt.
    pub fn disjoint_phase(&self, z_start: &Video, prompt: &PromptSpec, branch: Branch, start_iter: usize) -> Result<(Video, Vec<StepRecord>)> {
        let total = self.total();
        if start_iter > total {
            return Err(Error::invalid("start_iter", format!("{start_iter} exceeds T = {total}")));
        }
        z_start.ensure_same_shape(&Video::zeros(self.latent_shape))?;
        let mut z = z_start.clone();
        let mut records = Vec::with_capacity(total - start_iter);
        for i in start_iter + 1..=total {
            let t = Timestep(total - i + 1);
            let eps = guided_denoise(self.model(), &z, prompt, t, self.cfg.guidance)?;
            let (next, clean, noise) = self.advance(&z, &eps, t, branch, i)?;
            records.push(StepRecord { t: t.0, branch, latent: z, eps_a: None, eps_b: None, eps, clean, noise });
            z = next;
        }
        Ok((z, records))
    }

    /// Linear-decay continuation: both branches advance together and each
    /// mixes in the other's estimate.
    fn coupled_phase(&self, start_a: &Video, start_b: &Video, start_iter: usize) -> Result<(Video, Video, Vec<StepRecord>)> {
        let total = self.total();
        let (mut za, mut zb) = (start_a.clone(), start_b.clone());
        let mut records = Vec::with_capacity(2 * (total - start_iter));
        let g = self.cfg.guidance;
        for i in start_iter + 1..=total {
            let t = Timestep(total - i + 1);
            let ea = guided_denoise(self.model(), &za, &self.cfg.prompt_a, t, g)?;
            let eb = guided_denoise(self.model(), &zb, &self.cfg.prompt_b, t, g)?;
            let (ua, ub) = combine_linear_decay(&ea, &eb, i, self.cfg.joint_steps, total)?;
            let (na, ca, noa) = self.advance(&za, &ua, t, Branch::A, i)?;
            let (nb, cb, nob) = self.advance(&zb, &ub, t, Branch::B, i)?;
            records.push(StepRecord { t: t.0, branch: Branch::A, latent: za, eps_a: Some(ea.clone()), eps_b: Some(eb.clone()), eps: ua, clean: ca, noise: noa });
            records.push(StepRecord { t: t.0, branch: Branch::B, latent: zb, eps_a: Some(ea), eps_b: Some(eb), eps: ub, clean: cb, noise: nob });
            za = na;
            zb = nb;
        }
        Ok((za, zb, records))
    }

    /// Runs the disjoint phase for both branches from the given starting
    /// latents and completes `trace` (which must hold the joint prefix).
    pub fn finish_from_fork(&self, mut trace: GenerationTrace, start_a: &Video, start_b: &Video) -> Result<MatchPair> {
        let k = self.cfg.joint_steps;
        let (za, zb, mut recs) = match self.cfg.combine {
            CombineMode::LinearDecay => self.coupled_phase(start_a, start_b, k)?,
            CombineMode::Average => {
                let run_a = || self.disjoint_phase(start_a, &self.cfg.prompt_a, Branch::A, k);
                let run_b = || self.disjoint_phase(start_b, &self.cfg.prompt_b, Branch::B, k);
                let ((za, mut ra), (zb, rb)) = if self.model().concurrency() == Concurrency::Concurrent && k < self.total() {
                    std::thread::scope(|s| {
                        let hb = s.spawn(run_b);
                        let a = run_a();
                        let b = hb.join().expect("branch thread panicked");
                        Ok::<_, Error>((a?, b?))
                    })?
                } else {
                    (run_a()?, run_b()?)
                };
                ra.extend(rb);
                (za, zb, ra)
            }
        };
        trace.records.append(&mut recs);
        let x_a = self.engine.codec.decode(&za)?;
        let x_b = self.engine.codec.decode(&zb)?;
        trace.final_a = Some(za);
        trace.final_b = Some(zb);
        Ok(MatchPair { x_a, x_b, trace })
    }

    pub fn generate_match_pair(&self) -> Result<MatchPair> {
        let (fork, trace) = self.joint_phase()?;
        self.finish_from_fork(trace, &fork, &fork)
    }

    /// Ordinary single-prompt sampling from `z_T` drawn with `seed_init`.
    pub fn generate_single(&self, prompt: &PromptSpec, seed_init: u64, branch: Branch) -> Result<PixelVideo> {
        self.engine.codec.decode(&self.generate_single_latent(prompt, seed_init, branch)?)
    }

    /// As [`Self::generate_single`], returning the final latent.
    pub fn generate_single_latent(&self, prompt: &PromptSpec, seed_init: u64, branch: Branch) -> Result<LatentVideo> {
        let z = init_latent(seed_init, self.latent_shape);
        Ok(self.disjoint_phase(&z, prompt, branch, 0)?.0)
    }

    pub fn engine(&self) -> &Engine {
        self.engine
    }

    /// Re-executes every recorded step and reports the first mismatch.
    pub fn replay(&self, trace: &GenerationTrace) -> Result<()> {
        let total = self.total();
        let fork_t = total - self.cfg.joint_steps;
        let g = self.cfg.guidance;
        for (i, r) in trace.records.iter().enumerate() {
            let t = Timestep(r.t);
            let iteration = total - r.t + 1;
            let prompt = if r.branch == Branch::B { &self.cfg.prompt_b } else { &self.cfg.prompt_a };
            let eps = match (r.branch, &r.eps_a, &r.eps_b) {
                (Branch::Joint, _, _) => {
                    let (ea, eb, eps) = self.joint_estimate(&r.latent, t)?;
                    check(i, "eps_a", r.eps_a.as_ref(), &ea)?;
                    check(i, "eps_b", r.eps_b.as_ref(), &eb)?;
                    eps
                }
                (branch, Some(ea), Some(eb)) => {
                    let own = guided_denoise(self.model(), &r.latent, prompt, t, g)?;
                    check(i, "own estimate", Some(if branch == Branch::A { ea } else { eb }), &own)?;
                    let (ua, ub) = combine_linear_decay(ea, eb, iteration, self.cfg.joint_steps, total)?;
                    if branch == Branch::A { ua } else { ub }
                }
                _ => guided_denoise(self.model(), &r.latent, prompt, t, g)?,
            };
            check(i, "eps", Some(&r.eps), &eps)?;
            let (next, clean, noise) = self.advance(&r.latent, &r.eps, t, r.branch, iteration)?;
            check(i, "clean", Some(&r.clean), &clean)?;
            if let Some(n) = &noise {
                check(i, "noise", r.noise.as_ref(), n)?;
            }
            let expected = match r.branch {
                Branch::Joint if r.t - 1 == fork_t => Some(&trace.fork),
                Branch::A | Branch::B if r.t == 1 => {
                    if r.branch == Branch::A { trace.final_a.as_ref() } else { trace.final_b.as_ref() }
                }
                branch => trace.records[i + 1..].iter().find(|n| n.branch == branch).map(|n| &n.latent),
            };
            check(i, "next latent", expected, &next)?;
        }
        Ok(())
    }
}

fn check(i: usize, what: &str, recorded: Option<&Video>, recomputed: &Video) -> Result<()> {
    match recorded {
        Some(r) if r.bit_eq(recomputed) => Ok(()),
        Some(_) => Err(Error::invalid("trace", format!("record {i}: {what} does not reproduce"))),
        None => Err(Error::Missing(format!("record {i}: {what}"))),
    }
}

/// Convenience wrapper: resolve the configuration's engine and generate.
pub fn generate_match_pair(cfg: &ForkConfig) -> Result<MatchPair> {
    let engine = Engine::for_config(cfg)?;
    ForkSampler::new(&engine, cfg)?.generate_match_pair()
}

/// Directory layout helper for a written trace.
pub fn trace_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("trace")
}
