//! Comparison methods that do not fork a shared trajectory.

use matchcut_core::forksampler::{Branch, ForkSampler};
use matchcut_core::schedule::{add_noise, Timestep};
use matchcut_core::{Error, PixelVideo, Result, Video};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Offset separating the second prompt's init seed from the first.
pub const LOWER_BOUND_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Two independent generations: `x_a` from `seed_init`, `x_b` from
/// `seed_init + LOWER_BOUND_SEED_OFFSET` (wrapping), so the branches share nothing.
pub fn baseline_lower_bound(sampler: &ForkSampler<'_>) -> Result<(PixelVideo, PixelVideo)> {
    let cfg = sampler.config();
    let x_a = sampler.generate_single(&cfg.prompt_a, cfg.seed_init, Branch::A)?;
    let x_b = sampler.generate_single(&cfg.prompt_b, cfg.seed_init.wrapping_add(LOWER_BOUND_SEED_OFFSET), Branch::B)?;
    Ok((x_a, x_b))
}

/// SDEdit-style editing: `x_a` is generated from the first prompt, its latent
/// is noised to timestep `noise_level` with noise drawn from `noise_seed`, and
/// the result is denoised under the second prompt.
pub fn baseline_v2v(sampler: &ForkSampler<'_>, noise_level: usize, noise_seed: u64) -> Result<(PixelVideo, PixelVideo)> {
    let cfg = sampler.config();
    let total = cfg.total_steps();
    if noise_level > total {
        return Err(Error::invalid("noise_level", format!("must be <= T = {total}, got {noise_level}")));
    }
    let codec = sampler.engine().codec.clone();
    let z_a = sampler.generate_single_latent(&cfg.prompt_a, cfg.seed_init, Branch::A)?;
    let z = v2v_start(sampler, &z_a, noise_level, noise_seed)?;
    let (z_b, _) = sampler.disjoint_phase(&z, &cfg.prompt_b, Branch::B, total - noise_level)?;
    Ok((codec.decode(&z_a)?, codec.decode(&z_b)?))
}

/// The noised latent the V2V baseline starts denoising from.
pub fn v2v_start(sampler: &ForkSampler<'_>, z_a: &Video, noise_level: usize, noise_seed: u64) -> Result<Video> {
    let noise = Video::randn(z_a.shape(), &mut ChaCha8Rng::seed_from_u64(noise_seed));
    add_noise(z_a, Timestep(noise_level), sampler.schedule(), &noise)
}

/// A method compared in a baseline sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Fork,
    LowerBound,
    V2v { noise_level: usize, noise_seed: u64 },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Fork => "fork".into(),
            Method::LowerBound => "lower_bound".into(),
            Method::V2v { noise_level, .. } => format!("v2v_{noise_level}"),
        }
    }
}
