//! One interactive session: its phase machine and on-disk state.

use std::path::{Path, PathBuf};

use matchcut_core::forksampler::{Engine, ForkConfig, ForkSampler, GenerationTrace};
use matchcut_core::intervene::{InterventionSpec, Staged};
use matchcut_core::metrics::Evaluator;
use matchcut_core::{Error, Result};
use matchcut_harness::{artifact_file, default_cut, GenerationOutputs, ARTIFACTS};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Created,
    JointDone,
    Intervened,
    Finished,
}

impl Phase {
    pub fn at_fork(self) -> bool {
        matches!(self, Phase::JointDone | Phase::Intervened)
    }
}

const RECORD_VERSION: u32 = 1;
const RECORD_FILE: &str = "session.json";

/// What `session.json` holds; enough to rebuild the session after a restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub version: u32,
    pub id: String,
    pub config: ForkConfig,
    pub phase: Phase,
    pub interventions: Vec<InterventionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branches {
    pub a: Vec<String>,
    pub b: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewInfo {
    /// `K = 0`: the preview is the decoded initial noise.
    pub degenerate: bool,
    /// Timestep of the fork point, `T - K`.
    pub fork_timestep: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub interventions: usize,
    /// PNG URLs, one per frame.
    pub branches: Branches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactInfo {
    pub name: String,
    pub file: String,
    pub url: String,
}

/// Wire form of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub phase: Phase,
    pub config: ForkConfig,
    pub interventions: Vec<InterventionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_job: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preview: Option<PreviewInfo>,
    pub artifacts: Vec<ArtifactInfo>,
}

pub struct Session {
    pub record: SessionRecord,
    pub dir: PathBuf,
    pub engine: Engine,
    /// Trace truncated to the fork point.
    pub trace: Option<GenerationTrace>,
    pub staged: Option<Staged>,
    pub running_job: Option<String>,
}

impl Session {
    /// Validates `config` and writes the session directory.
    pub fn create(id: String, dir: PathBuf, config: ForkConfig) -> Result<Self> {
        let engine = Engine::for_config(&config)?;
        ForkSampler::new(&engine, &config)?;
        std::fs::create_dir_all(&dir)?;
        let record = SessionRecord { version: RECORD_VERSION, id, config, phase: Phase::Created, interventions: Vec::new() };
        let s = Self { record, dir, engine, trace: None, staged: None, running_job: None };
        s.persist()?;
        Ok(s)
    }

    /// Rebuilds a session from its directory, replaying staged interventions.
    pub fn open(dir: &Path) -> Result<Self> {
        let record: SessionRecord = serde_json::from_slice(&std::fs::read(dir.join(RECORD_FILE))?)?;
        if record.version != RECORD_VERSION {
            return Err(Error::invalid("version", format!("unsupported session record version {}", record.version)));
        }
        let engine = Engine::for_config(&record.config)?;
        let mut s = Self { record, dir: dir.to_path_buf(), engine, trace: None, staged: None, running_job: None };
        if s.record.phase != Phase::Created {
            let trace = GenerationTrace::read_dir(&s.trace_dir())?;
            let sampler = ForkSampler::new(&s.engine, &s.record.config)?;
            let mut staged = Staged::new(&trace, s.engine.codec.as_ref())?;
            for spec in &s.record.interventions {
                staged.apply(spec, &sampler, s.engine.codec.as_ref())?;
            }
            s.trace = Some(trace);
            s.staged = Some(staged);
        }
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.record.id
    }

    pub fn phase(&self) -> Phase {
        self.record.phase
    }

    fn trace_dir(&self) -> PathBuf {
        self.dir.join("trace")
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.dir.join("artifacts")
    }

    pub fn persist(&self) -> Result<()> {
        let tmp = self.dir.join(format!("{RECORD_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.record)?)?;
        std::fs::rename(tmp, self.dir.join(RECORD_FILE))?;
        Ok(())
    }

    pub fn preview(&self) -> Option<PreviewInfo> {
        let staged = self.staged.as_ref()?;
        let cfg = &self.record.config;
        let s = staged.preview_a.shape();
        let urls = |b: &str| (0..s.frames).map(|f| format!("/sessions/{}/preview?branch={b}&frame={f}", self.id())).collect();
        Some(PreviewInfo {
            degenerate: cfg.joint_steps == 0,
            fork_timestep: cfg.total_steps() - cfg.joint_steps,
            frames: s.frames,
            height: s.height,
            width: s.width,
            interventions: staged.specs.len(),
            branches: Branches { a: urls("a"), b: urls("b") },
        })
    }

    pub fn state(&self) -> SessionState {
        let artifacts = if self.phase() == Phase::Finished {
            ARTIFACTS
                .iter()
                .map(|(name, file)| ArtifactInfo {
                    name: (*name).into(),
                    file: (*file).into(),
                    url: format!("/sessions/{}/artifacts/{name}", self.id()),
                })
                .collect()
        } else {
            Vec::new()
        };
        SessionState {
            id: self.record.id.clone(),
            phase: self.record.phase,
            config: self.record.config.clone(),
            interventions: self.record.interventions.clone(),
            running_job: self.running_job.clone(),
            preview: self.preview(),
            artifacts,
        }
    }

    pub fn artifact_path(&self, name: &str) -> Option<PathBuf> {
        artifact_file(name).map(|f| self.artifacts_dir().join(f))
    }
}

/// Inputs of a long-running step, detached from the session lock.
pub struct Work {
    pub engine: Engine,
    pub config: ForkConfig,
    pub dir: PathBuf,
    pub trace: Option<GenerationTrace>,
    pub staged: Option<Staged>,
}

impl Work {
    pub fn of(s: &Session) -> Self {
        Self {
            engine: s.engine.clone(),
            config: s.record.config.clone(),
            dir: s.dir.clone(),
            trace: s.trace.clone(),
            staged: s.staged.clone(),
        }
    }

    /// Joint phase; writes the fork-point trace.
    pub fn joint(self) -> Result<(GenerationTrace, Staged)> {
        let sampler = ForkSampler::new(&self.engine, &self.config)?;
        let (_, trace) = sampler.joint_phase()?;
        trace.write_dir(&self.dir.join("trace"))?;
        let staged = Staged::new(&trace, self.engine.codec.as_ref())?;
        Ok((trace, staged))
    }

    /// Disjoint phases from the staged latents; writes the artifacts.
    pub fn finalize(self, ev: &Evaluator) -> Result<()> {
        let (Some(trace), Some(staged)) = (&self.trace, &self.staged) else {
            return Err(Error::Missing("fork point".into()));
        };
        let sampler = ForkSampler::new(&self.engine, &self.config)?;
        let pair = staged.finish(&sampler, trace)?;
        let outputs = GenerationOutputs::from_pair(&pair, default_cut(self.config.frames), ev)?;
        outputs.write(&self.dir.join("artifacts"))
    }

    /// Stages one more intervention on the current previews.
    pub fn intervene(self, spec: &InterventionSpec) -> Result<Staged> {
        let Some(mut staged) = self.staged else {
            return Err(Error::Missing("fork point".into()));
        };
        let sampler = ForkSampler::new(&self.engine, &self.config)?;
        staged.apply(spec, &sampler, self.engine.codec.as_ref())?;
        Ok(staged)
    }
}
