//! Noise-prediction interface, classifier-free guidance and latent codecs.
//!
//! A [`Denoiser`] maps `(z_t, prompt, t)` to a noise estimate of the same
//! shape. Guidance combines a conditional and an unconditional estimate as
//! `null + s * (cond - null)`; the scales 0 and 1 return the unconditional and
//! conditional estimates exactly.
//!
//! External pretrained models plug in by implementing [`Denoiser`] (and
//! [`LatentCodec`] if they diffuse in a latent space). Implementations must be
//! deterministic for fixed weights, preserve the input shape, reject prompt
//! kinds they cannot handle with [`Error::UnsupportedPrompt`], and report via
//! [`Denoiser::concurrency`] whether inference may run from several threads
//! at once.

pub mod codec;
pub mod net;
pub mod toy;
pub mod train;

use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{ScheduleSpec, Timestep};
use crate::video::{LatentVideo, Video};

pub use codec::{CodecChoice, ConvCodec, IdentityCodec, LatentCodec};
pub use toy::ToyBackbone;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    ToyClass,
    Text,
}

/// A conditioning prompt: a toy scene class, free text for external
/// backbones, or the null token used for unconditional estimates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default)]
    pub is_null: bool,
}

impl PromptSpec {
    pub fn toy(class_id: u32) -> Self {
        Self { kind: PromptKind::ToyClass, class_id: Some(class_id), text: None, is_null: false }
    }

    pub fn text(text: impl Into<String>) -> Self {
        Self { kind: PromptKind::Text, class_id: None, text: Some(text.into()), is_null: false }
    }

    pub fn null(kind: PromptKind) -> Self {
        Self { kind, class_id: None, text: None, is_null: true }
    }

    /// The null prompt of the same kind.
    pub fn to_null(&self) -> Self {
        Self::null(self.kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_null {
            if self.class_id.is_some() || self.text.is_some() {
                return Err(Error::invalid("prompt", "a null prompt carries no class_id or text"));
            }
            return Ok(());
        }
        match (self.kind, &self.class_id, &self.text) {
            (PromptKind::ToyClass, Some(_), None) => Ok(()),
            (PromptKind::Text, None, Some(t)) if !t.is_empty() => Ok(()),
            (PromptKind::ToyClass, _, _) => Err(Error::invalid("class_id", "toy_class prompts need class_id and no text")),
            (PromptKind::Text, _, _) => Err(Error::invalid("text", "text prompts need non-empty text and no class_id")),
        }
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.is_null, self.class_id, &self.text) {
            (true, _, _) => write!(f, "<null>"),
            (false, Some(c), _) => write!(f, "class {c}"),
            (false, None, Some(t)) => write!(f, "{t:?}"),
            _ => write!(f, "<invalid>"),
        }
    }
}

/// Whether a backbone may be invoked from several threads at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    Concurrent,
    Serialized,
}

pub trait Denoiser: Send + Sync {
    /// Noise estimate for `z` at timestep `t` (1..=T) under `prompt`.
    fn denoise(&self, z: &LatentVideo, prompt: &PromptSpec, t: Timestep) -> Result<LatentVideo>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    /// Schedule the model was trained against, if it is tied to one.
    fn schedule(&self) -> Option<&ScheduleSpec> {
        None
    }

    fn name(&self) -> String;
}

/// Adapter turning a closure into a [`Denoiser`]; handy for tests and for
/// wrapping external inference code.
pub struct FnDenoiser<F> {
    name: String,
    f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(&LatentVideo, &PromptSpec, Timestep) -> Result<LatentVideo> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&LatentVideo, &PromptSpec, Timestep) -> Result<LatentVideo> + Send + Sync,
{
    fn denoise(&self, z: &LatentVideo, prompt: &PromptSpec, t: Timestep) -> Result<LatentVideo> {
        let out = (self.f)(z, prompt, t)?;
        out.ensure_same_shape(z)?;
        Ok(out)
    }

    fn name(&self) -> String {
        self.name.clone()
    }
}

/// Predicts zero noise for every input; sampling with it is pure DDIM scaling.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn denoise(&self, z: &LatentVideo, _prompt: &PromptSpec, _t: Timestep) -> Result<LatentVideo> {
        Ok(Video::zeros(z.shape()))
    }

    fn name(&self) -> String {
        "zero".into()
    }
}

/// Which backbone a configuration binds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneChoice {
    /// The toy network; `dir` holds weights written by training, `None` uses the bundled weights.
    Toy {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
    Zero,
}

impl Default for BackboneChoice {
    fn default() -> Self {
        BackboneChoice::Toy { dir: None }
    }
}

pub fn load_backbone(choice: &BackboneChoice) -> Result<Arc<dyn Denoiser>> {
    static BUNDLED: OnceLock<Arc<ToyBackbone>> = OnceLock::new();
    match choice {
        BackboneChoice::Zero => Ok(Arc::new(ZeroDenoiser)),
        BackboneChoice::Toy { dir: Some(dir) } => Ok(Arc::new(ToyBackbone::load(dir)?)),
        BackboneChoice::Toy { dir: None } => {
            if let Some(b) = BUNDLED.get() {
                return Ok(b.clone());
            }
            let b = Arc::new(ToyBackbone::bundled()?);
            Ok(BUNDLED.get_or_init(|| b).clone())
        }
    }
}

pub fn load_codec(choice: &CodecChoice) -> Result<Arc<dyn LatentCodec>> {
    match choice {
        CodecChoice::Identity => Ok(Arc::new(IdentityCodec::rgb())),
        CodecChoice::Conv { dir } => Ok(Arc::new(ConvCodec::load(dir)?)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 3.0 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::invalid("guidance.scale", format!("must be finite and >= 0, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn needs_null(&self) -> bool {
        self.scale != 1.0
    }

    pub fn needs_cond(&self) -> bool {
        self.scale != 0.0
    }
}

/// `null + scale * (cond - null)`, exact at scales 0 and 1.
pub fn apply_guidance(null: &LatentVideo, cond: &LatentVideo, scale: f32) -> Result<LatentVideo> {
    null.ensure_same_shape(cond)?;
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    if scale == 0.0 {
        return Ok(null.clone());
    }
    null.zip_map(cond, |n, c| n + scale * (c - n))
}

/// Guided noise estimate for one prompt.
pub fn guided_denoise(
    model: &dyn Denoiser,
    z: &LatentVideo,
    prompt: &PromptSpec,
    t: Timestep,
    g: GuidanceConfig,
) -> Result<LatentVideo> {
    g.validate()?;
    if prompt.is_null || g.scale == 1.0 {
        return model.denoise(z, prompt, t);
    }
    let null = model.denoise(z, &prompt.to_null(), t)?;
    if g.scale == 0.0 {
        return Ok(null);
    }
    let cond = model.denoise(z, prompt, t)?;
    apply_guidance(&null, &cond, g.scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{Video, VideoShape};

    fn scalar(v: f32) -> Video {
        Video::filled(VideoShape::new(1, 1, 1, 1), v)
    }

    fn constant_model() -> impl Denoiser {
        FnDenoiser::new("const", |z: &LatentVideo, p: &PromptSpec, _t| {
            Ok(Video::filled(z.shape(), if p.is_null { 0.1 } else { 0.3 }))
        })
    }

    #[test]
    fn prompt_validation() {
        assert!(PromptSpec::toy(1).validate().is_ok());
        assert!(PromptSpec::text("a cat").validate().is_ok());
        assert!(PromptSpec::null(PromptKind::ToyClass).validate().is_ok());
        let mut bad = PromptSpec::toy(1);
        bad.text = Some("x".into());
        assert_eq!(bad.validate().unwrap_err().field(), Some("class_id"));
        assert_eq!(PromptSpec::text("").validate().unwrap_err().field(), Some("text"));
        let mut bad_null = PromptSpec::toy(2);
        bad_null.is_null = true;
        assert!(bad_null.validate().is_err());
    }

    #[test]
    fn prompt_json_shape() {
        let j = serde_json::to_string(&PromptSpec::toy(2)).unwrap();
        assert_eq!(j, r#"{"kind":"toy_class","class_id":2,"is_null":false}"#);
        let p: PromptSpec = serde_json::from_str(r#"{"kind":"toy_class","class_id":0}"#).unwrap();
        assert_eq!(p, PromptSpec::toy(0));
    }

    #[test]
    fn guidance_scalar_formula() {
        let out = apply_guidance(&scalar(0.1), &scalar(0.3), 5.0).unwrap();
        assert!((out.data()[0] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn guidance_boundaries_are_exact() {
        let m = constant_model();
        let z = scalar(0.0);
        let p = PromptSpec::toy(0);
        let t = Timestep(3);
        let cond = m.denoise(&z, &p, t).unwrap();
        let null = m.denoise(&z, &p.to_null(), t).unwrap();
        assert!(guided_denoise(&m, &z, &p, t, GuidanceConfig { scale: 1.0 }).unwrap().bit_eq(&cond));
        assert!(guided_denoise(&m, &z, &p, t, GuidanceConfig { scale: 0.0 }).unwrap().bit_eq(&null));
    }

    #[test]
    fn guidance_is_affine_in_scale() {
        let m = FnDenoiser::new("lin", |z: &LatentVideo, p: &PromptSpec, _t| {
            let k = if p.is_null { -0.7 } else { 1.3 };
            Ok(z.map(|x| k * x + 0.01))
        });
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let z = Video::randn(VideoShape::new(2, 1, 3, 3), &mut rng);
        let p = PromptSpec::toy(1);
        let at = |s| guided_denoise(&m, &z, &p, Timestep(1), GuidanceConfig { scale: s }).unwrap();
        let (o0, o1) = (at(0.0), at(1.0));
        for s in [0.5f32, 2.0, 6.5] {
            let expect = o0.zip_map(&o1, |a, b| a + s * (b - a)).unwrap();
            assert!(at(s).bit_eq(&expect), "scale {s}");
        }
    }

    #[test]
    fn negative_scale_is_rejected() {
        let m = constant_model();
        let err = guided_denoise(&m, &scalar(0.0), &PromptSpec::toy(0), Timestep(1), GuidanceConfig { scale: -1.0 });
        assert_eq!(err.unwrap_err().field(), Some("guidance.scale"));
    }
}
