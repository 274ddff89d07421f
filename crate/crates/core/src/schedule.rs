//! Timestep coefficients and the single-step denoise/renoise primitives.
//!
//! Every sampler in the crate advances a latent with the two-stage update
//!
//! ```text
//! z0_est  = z_t - gamma[t] * eps_t           (predict_clean)
//! z_{t-1} = eta[t] * z0_est + sigma[t] * xi  (renoise_step)
//! ```
//!
//! where `eps_t` is the network's noise prediction and `xi ~ N(0, I)` is fresh
//! path noise. The coefficients come from a variance-preserving forward process
//! `z_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` with cumulative signal level
//! `ab_t = prod_{i <= t} (1 - beta_i)` and the convention `ab_0 = 1`.
//!
//! Generalised DDIM with stochasticity `s` (0 = deterministic DDIM, 1 = the
//! ancestral DDPM posterior variance) reads
//!
//! ```text
//! x0_hat  = (z_t - sqrt(1 - ab_t) eps_t) / sqrt(ab_t)
//! z_{t-1} = sqrt(ab_{t-1}) x0_hat + sqrt(1 - ab_{t-1} - sigma_t^2) eps_t + sigma_t xi
//! sigma_t = s * sqrt((1 - ab_{t-1}) / (1 - ab_t)) * sqrt(1 - ab_t / ab_{t-1})
//! ```
//!
//! Collecting the `z_t` and `eps_t` terms gives the factorised form above with
//!
//! ```text
//! eta_t   = sqrt(ab_{t-1} / ab_t)
//! gamma_t = sqrt(1 - ab_t) - sqrt(1 - ab_{t-1} - sigma_t^2) / eta_t
//! ```
//!
//! so the two primitives compose to exactly one DDIM step, and with `s = 0`
//! the `xi` term vanishes. The intermediate `z_t - gamma_t eps_t` is the clean
//! estimate expressed in the `ab_{t-1}`-rescaled frame: dividing it by
//! `sqrt(ab_t)` instead of multiplying by `eta_t` recovers `x0_hat` up to the
//! retained noise direction, and at `t = 1` (`ab_0 = 1`, `sigma_1 = 0`) it
//! coincides with `sqrt(ab_1) x0_hat`. Previews and interventions need the
//! unscaled `x0_hat`, which [`clean_estimate`] returns.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{LatentVideo, Video};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaCurve {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub num_steps: usize,
    pub beta_curve: BetaCurve,
    pub beta_start: f64,
    pub beta_end: f64,
    /// 0 = deterministic DDIM, 1 = ancestral sampling.
    #[serde(default)]
    pub stochasticity: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            num_steps: 50,
            beta_curve: BetaCurve::Linear,
            beta_start: 1e-3,
            beta_end: 0.2,
            stochasticity: 0.0,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::invalid("num_steps", "must be at least 1"));
        }
        for (name, b) in [("beta_start", self.beta_start), ("beta_end", self.beta_end)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(name, format!("{b} is outside (0, 1)")));
            }
        }
        if self.beta_start >= self.beta_end {
            return Err(Error::invalid(
                "beta_start",
                format!("{} must be below beta_end {}", self.beta_start, self.beta_end),
            ));
        }
        if !(0.0..=1.0).contains(&self.stochasticity) {
            return Err(Error::invalid(
                "stochasticity",
                format!("{} is outside [0, 1]", self.stochasticity),
            ));
        }
        Ok(())
    }

    fn betas(&self) -> Vec<f64> {
        let n = self.num_steps;
        match self.beta_curve {
            BetaCurve::Linear => {
                if n == 1 {
                    return vec![self.beta_start];
                }
                (0..n)
                    .map(|i| {
                        self.beta_start
                            + (self.beta_end - self.beta_start) * i as f64 / (n - 1) as f64
                    })
                    .collect()
            }
            BetaCurve::Cosine => {
                const OFFSET: f64 = 0.008;
                let f = |t: f64| {
                    let u = (t / n as f64 + OFFSET) / (1.0 + OFFSET) * std::f64::consts::FRAC_PI_2;
                    u.cos().powi(2)
                };
                (1..=n).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999)).collect()
            }
        }
    }
}

/// A diffusion timestep; `t = T` is pure noise and `t = 0` fully denoised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestep(pub usize);

impl Timestep {
    pub fn get(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for Timestep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "t={}", self.0)
    }
}

/// Per-timestep coefficient tables. Index `i` holds the value for `t = i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub spec: ScheduleSpec,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn build_schedule(spec: &ScheduleSpec) -> Result<NoiseSchedule> {
    spec.validate()?;
    let betas = spec.betas();
    let mut alpha_bar = Vec::with_capacity(betas.len());
    let mut acc = 1.0f64;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    let n = spec.num_steps;
    let (mut gamma, mut eta, mut sigma) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let ab_t = alpha_bar[i];
        let ab_prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
        let s = spec.stochasticity
            * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
            * (1.0 - ab_t / ab_prev).sqrt();
        let e = (ab_prev / ab_t).sqrt();
        let dir = (1.0 - ab_prev - s * s).max(0.0).sqrt();
        sigma[i] = s;
        eta[i] = e;
        gamma[i] = (1.0 - ab_t).sqrt() - dir / e;
    }
    Ok(NoiseSchedule { spec: *spec, gamma, eta, sigma, alpha_bar })
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    fn index(&self, t: Timestep) -> Result<usize> {
        if t.0 == 0 || t.0 > self.num_steps() {
            return Err(Error::Timestep { t: t.0, steps: self.num_steps() });
        }
        Ok(t.0 - 1)
    }

    pub fn gamma_at(&self, t: Timestep) -> Result<f64> {
        Ok(self.gamma[self.index(t)?])
    }

    pub fn eta_at(&self, t: Timestep) -> Result<f64> {
        Ok(self.eta[self.index(t)?])
    }

    pub fn sigma_at(&self, t: Timestep) -> Result<f64> {
        Ok(self.sigma[self.index(t)?])
    }

    /// Cumulative signal level, with `alpha_bar(0) = 1`.
    pub fn alpha_bar_at(&self, t: Timestep) -> Result<f64> {
        if t.0 == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn is_deterministic(&self) -> bool {
        self.sigma.iter().all(|&s| s == 0.0)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// `z_t - gamma[t] * eps_t`.
pub fn predict_clean(
    z_t: &LatentVideo,
    eps_t: &LatentVideo,
    t: Timestep,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    let g = sched.gamma_at(t)? as f32;
    z_t.zip_map(eps_t, |z, e| z - g * e)
}

/// `eta[t] * z0_est + sigma[t] * noise`. The noise is ignored when `sigma[t] = 0`.
pub fn renoise_step(
    z0_est: &LatentVideo,
    t: Timestep,
    sched: &NoiseSchedule,
    noise: &LatentVideo,
) -> Result<LatentVideo> {
    z0_est.ensure_same_shape(noise)?;
    let e = sched.eta_at(t)? as f32;
    let s = sched.sigma_at(t)? as f32;
    if s == 0.0 {
        return Ok(z0_est.map(|v| e * v));
    }
    z0_est.zip_map(noise, |v, n| e * v + s * n)
}

/// One denoising iteration `z_t -> z_{t-1}`.
pub fn ddim_step(
    z_t: &LatentVideo,
    eps_t: &LatentVideo,
    t: Timestep,
    sched: &NoiseSchedule,
    noise: &LatentVideo,
) -> Result<LatentVideo> {
    renoise_step(&predict_clean(z_t, eps_t, t, sched)?, t, sched, noise)
}

/// The unscaled clean-signal estimate `(z_t - sqrt(1 - ab_t) eps_t) / sqrt(ab_t)`.
pub fn clean_estimate(
    z_t: &LatentVideo,
    eps_t: &LatentVideo,
    t: Timestep,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    let ab = sched.alpha_bar_at(t)?;
    if t.0 == 0 {
        return Ok(z_t.clone());
    }
    let (a, b) = ((1.0 / ab.sqrt()) as f32, (1.0 - ab).sqrt() as f32);
    z_t.zip_map(eps_t, |z, e| (z - b * e) * a)
}

/// Forward-process sample `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
pub fn add_noise(
    x0: &LatentVideo,
    t: Timestep,
    sched: &NoiseSchedule,
    noise: &LatentVideo,
) -> Result<LatentVideo> {
    let ab = sched.alpha_bar_at(t)?;
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.zip_map(noise, |x, n| a * x + b * n)
}

/// Zero tensor shaped like `v`, used as the path noise of deterministic steps.
pub fn no_noise(v: &Video) -> Video {
    Video::zeros(v.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::VideoShape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f32) -> Video {
        Video::filled(VideoShape::new(1, 1, 1, 1), v)
    }

    fn manual(gamma: f64, eta: f64, sigma: f64) -> NoiseSchedule {
        NoiseSchedule {
            spec: ScheduleSpec::default(),
            gamma: vec![gamma],
            eta: vec![eta],
            sigma: vec![sigma],
            alpha_bar: vec![0.5],
        }
    }

    #[test]
    fn single_step_cumulative_product() {
        let spec = ScheduleSpec {
            num_steps: 1,
            beta_curve: BetaCurve::Linear,
            beta_start: 0.5,
            beta_end: 0.5 + 1e-9,
            stochasticity: 0.0,
        };
        let s = build_schedule(&spec).unwrap();
        assert_eq!(s.alpha_bar, vec![1.0 - 0.5]);
    }

    #[test]
    fn fifty_step_alpha_bar_matches_running_product() {
        // Frozen from a standalone float64 running-product script.
        let spec = ScheduleSpec { beta_start: 1e-4, beta_end: 2e-2, ..Default::default() };
        let s = build_schedule(&spec).unwrap();
        let expected = 0.602_951_597_329_715;
        assert!(((s.alpha_bar[49] - expected) / expected).abs() < 1e-12);
        let s = build_schedule(&ScheduleSpec::default()).unwrap();
        assert!((s.alpha_bar[49] - 0.004_505_985_481_139_705).abs() < 1e-14);
    }

    #[test]
    fn deterministic_spec_has_zero_sigma() {
        for curve in [BetaCurve::Linear, BetaCurve::Cosine] {
            let s = build_schedule(&ScheduleSpec { beta_curve: curve, ..Default::default() }).unwrap();
            assert!(s.sigma.iter().all(|&v| v == 0.0));
            assert!(s.is_deterministic());
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let cases = [
            (ScheduleSpec { num_steps: 0, ..Default::default() }, "num_steps"),
            (ScheduleSpec { beta_start: 0.0, ..Default::default() }, "beta_start"),
            (ScheduleSpec { beta_end: 1.0, ..Default::default() }, "beta_end"),
            (ScheduleSpec { beta_start: 0.3, beta_end: 0.2, ..Default::default() }, "beta_start"),
            (ScheduleSpec { stochasticity: 1.5, ..Default::default() }, "stochasticity"),
        ];
        for (spec, field) in cases {
            let err = build_schedule(&spec).unwrap_err();
            assert_eq!(err.field(), Some(field), "{spec:?}");
        }
    }

    #[test]
    fn table_invariants() {
        for curve in [BetaCurve::Linear, BetaCurve::Cosine] {
            for stoch in [0.0, 0.5, 1.0] {
                let spec = ScheduleSpec { beta_curve: curve, stochasticity: stoch, ..Default::default() };
                let s = build_schedule(&spec).unwrap();
                assert_eq!(s.gamma.len(), 50);
                assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
                assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a <= 1.0));
                assert!(s.sigma.iter().all(|&v| v >= 0.0));
                assert!(s.eta.iter().all(|&v| v > 0.0));
                assert_eq!(s.sigma[0], 0.0);
            }
        }
    }

    #[test]
    fn predict_clean_scalar_and_identity() {
        let s = manual(1.0, 0.8, 0.0);
        let out = predict_clean(&scalar(0.5), &scalar(0.2), Timestep(1), &s).unwrap();
        assert!((out.data()[0] - 0.3).abs() < 1e-7);
        let z = scalar(0.7);
        assert!(predict_clean(&z, &scalar(0.0), Timestep(1), &s).unwrap().bit_eq(&z));
    }

    #[test]
    fn predict_clean_errors() {
        let s = manual(1.0, 0.8, 0.0);
        assert!(matches!(
            predict_clean(&scalar(0.5), &scalar(0.2), Timestep(0), &s),
            Err(Error::Timestep { .. })
        ));
        let other = Video::zeros(VideoShape::new(1, 1, 2, 1));
        assert!(matches!(
            predict_clean(&scalar(0.5), &other, Timestep(1), &s),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(renoise_step(&scalar(0.5), Timestep(1), &s, &other).is_err());
    }

    #[test]
    fn renoise_scalar_cases() {
        let s = manual(1.0, 0.8, 0.0);
        for n in [0.0, 1.0, -3.0] {
            let out = renoise_step(&scalar(1.0), Timestep(1), &s, &scalar(n)).unwrap();
            assert!((out.data()[0] - 0.8).abs() < 1e-7);
        }
        let s = manual(1.0, 0.8, 0.5);
        let out = renoise_step(&scalar(0.0), Timestep(1), &s, &scalar(1.0)).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn ddim_step_composition() {
        let s = manual(1.0, 0.8, 0.0);
        let out = ddim_step(&scalar(0.5), &scalar(0.2), Timestep(1), &s, &scalar(9.0)).unwrap();
        assert!((out.data()[0] - 0.24).abs() < 1e-7);
    }

    #[test]
    fn final_step_scales_clean_estimate() {
        let s = build_schedule(&ScheduleSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = VideoShape::new(1, 1, 2, 2);
        let z = Video::randn(shape, &mut rng);
        let e = Video::randn(shape, &mut rng);
        let z0 = predict_clean(&z, &e, Timestep(1), &s).unwrap();
        let out = ddim_step(&z, &e, Timestep(1), &s, &no_noise(&z)).unwrap();
        let eta1 = s.eta[0] as f32;
        assert!(out.bit_eq(&z0.map(|v| eta1 * v)));
    }

    #[test]
    fn deterministic_step_is_ddim() {
        // Cross-check the factorised step against the textbook DDIM update.
        let s = build_schedule(&ScheduleSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = VideoShape::new(1, 1, 3, 3);
        let z = Video::randn(shape, &mut rng);
        let e = Video::randn(shape, &mut rng);
        for t in [1usize, 2, 17, 50] {
            let ab = s.alpha_bar[t - 1];
            let ab_prev = if t == 1 { 1.0 } else { s.alpha_bar[t - 2] };
            let out = ddim_step(&z, &e, Timestep(t), &s, &no_noise(&z)).unwrap();
            for i in 0..shape.len() {
                let (zi, ei) = (z.data()[i] as f64, e.data()[i] as f64);
                let x0 = (zi - (1.0 - ab).sqrt() * ei) / ab.sqrt();
                let want = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * ei;
                assert!((out.data()[i] as f64 - want).abs() < 1e-4 * (1.0 + want.abs()), "t={t}");
            }
        }
    }

    #[test]
    fn clean_estimate_inverts_add_noise() {
        let s = build_schedule(&ScheduleSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = VideoShape::new(1, 1, 4, 4);
        let x0 = Video::randn(shape, &mut rng);
        let n = Video::randn(shape, &mut rng);
        let zt = add_noise(&x0, Timestep(20), &s, &n).unwrap();
        let back = clean_estimate(&zt, &n, Timestep(20), &s).unwrap();
        assert!(back.max_abs_diff(&x0).unwrap() < 1e-4);
    }

    #[test]
    fn json_roundtrip() {
        let s = build_schedule(&ScheduleSpec { stochasticity: 1.0, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("schedule.json");
        s.to_json_file(&p).unwrap();
        assert_eq!(NoiseSchedule::from_json_file(&p).unwrap(), s);
    }

    proptest! {
        #[test]
        fn step_is_homogeneous(alpha in -4.0f32..4.0, seed in 0u64..1000, t in 1usize..=50) {
            let s = build_schedule(&ScheduleSpec::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = VideoShape::new(1, 1, 3, 3);
            let z = Video::randn(shape, &mut rng);
            let e = Video::randn(shape, &mut rng);
            let lhs = ddim_step(&z.map(|v| alpha * v), &e.map(|v| alpha * v), Timestep(t), &s, &no_noise(&z)).unwrap();
            let rhs = ddim_step(&z, &e, Timestep(t), &s, &no_noise(&z)).unwrap().map(|v| alpha * v);
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
            }
        }
    }
}
