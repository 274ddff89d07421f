//! The bundled toy backbone: a [`DenoiserNet`] bound to the schedule it was trained on.

use std::path::{Path, PathBuf};

use crate::backbone::net::{DenoiserNet, NetConfig, NetInput};
use crate::backbone::train::TrainManifest;
use crate::backbone::{Concurrency, Denoiser, PromptKind, PromptSpec};
use crate::error::{Error, Result};
use crate::io::{decode_tensors, read_tensors, write_tensors};
use crate::nn::{export_params, import_params, zero_values};
use crate::schedule::{ScheduleSpec, Timestep};
use crate::video::LatentVideo;

const WEIGHTS_FILE: &str = "backbone.mctc";
const MANIFEST_FILE: &str = "manifest.json";

static BUNDLED_WEIGHTS: &[u8] = include_bytes!("../../assets/toy-backbone/backbone.mctc");
static BUNDLED_MANIFEST: &str = include_str!("../../assets/toy-backbone/manifest.json");

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    net: DenoiserNet,
    schedule: ScheduleSpec,
    manifest: Option<TrainManifest>,
}

impl ToyBackbone {
    pub fn new(net: DenoiserNet, schedule: ScheduleSpec) -> Self {
        Self { net, schedule, manifest: None }
    }

    /// A backbone whose every weight is zero; it predicts zero noise everywhere.
    pub fn zeroed(config: NetConfig, schedule: ScheduleSpec) -> Self {
        let mut net = DenoiserNet::new(config, 0);
        zero_values(&mut net);
        Self::new(net, schedule)
    }

    pub fn with_manifest(mut self, manifest: TrainManifest) -> Self {
        self.manifest = Some(manifest);
        self
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }

    pub fn manifest(&self) -> Option<&TrainManifest> {
        self.manifest.as_ref()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = self.manifest.as_ref().ok_or_else(|| Error::Missing("training manifest".into()))?;
        std::fs::create_dir_all(dir)?;
        write_tensors(&dir.join(WEIGHTS_FILE), &export_params(&self.net, ""))?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: TrainManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        let tensors = read_tensors(&dir.join(WEIGHTS_FILE))?;
        Self::from_parts(manifest, &tensors)
    }

    /// The weights shipped with the crate.
    pub fn bundled() -> Result<Self> {
        let manifest: TrainManifest = serde_json::from_str(BUNDLED_MANIFEST)?;
        let tensors = decode_tensors(BUNDLED_WEIGHTS, &PathBuf::from("<bundled>"))?;
        Self::from_parts(manifest, &tensors)
    }

    fn from_parts(manifest: TrainManifest, tensors: &[crate::io::NamedTensor]) -> Result<Self> {
        let mut net = DenoiserNet::new(manifest.config.net.clone(), 0);
        import_params(&mut net, "", tensors)?;
        Ok(Self { net, schedule: manifest.config.schedule, manifest: Some(manifest) })
    }

    fn class_index(&self, prompt: &PromptSpec) -> Result<usize> {
        if prompt.kind != PromptKind::ToyClass {
            return Err(Error::UnsupportedPrompt(format!("{:?}", prompt.kind)));
        }
        if prompt.is_null {
            return Ok(self.net.null_index());
        }
        match prompt.class_id {
            Some(c) if (c as usize) < self.net.config.num_classes => Ok(c as usize),
            Some(c) => Err(Error::invalid("class_id", format!("{c} >= {} classes", self.net.config.num_classes))),
            None => Err(Error::invalid("class_id", "missing")),
        }
    }
}

impl Denoiser for ToyBackbone {
    fn denoise(&self, z: &LatentVideo, prompt: &PromptSpec, t: Timestep) -> Result<LatentVideo> {
        let steps = self.schedule.num_steps;
        if t.0 == 0 || t.0 > steps {
            return Err(Error::Timestep { t: t.0, steps });
        }
        let class_index = self.class_index(prompt)?;
        let time = t.0 as f32 / steps as f32;
        let mut out = self.net.forward(&[NetInput { video: z, class_index, time }], None)?;
        Ok(out.remove(0))
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    fn schedule(&self) -> Option<&ScheduleSpec> {
        Some(&self.schedule)
    }

    fn name(&self) -> String {
        "toy".into()
    }
}
