//! The artifact set of one generation, shared by the CLI and the service.

use std::path::Path;

use matchcut_core::forksampler::MatchPair;
use matchcut_core::io::{content_hash, encode_apng};
use matchcut_core::metrics::{evaluate_pairs, EvalPair, Evaluator, MetricReport};
use matchcut_core::{PixelVideo, Result};

use crate::assemble::assemble_matchcut;

/// Artifact names and the files that hold them.
pub const ARTIFACTS: [(&str, &str); 4] =
    [("x_a", "x_a.png"), ("x_b", "x_b.png"), ("matchcut", "matchcut.png"), ("report", "report.json")];

pub fn artifact_file(name: &str) -> Option<&'static str> {
    ARTIFACTS.iter().find(|(n, _)| *n == name).map(|(_, f)| *f)
}

#[derive(Debug, Clone)]
pub struct GenerationOutputs {
    pub x_a: PixelVideo,
    pub x_b: PixelVideo,
    pub matchcut: PixelVideo,
    pub report: MetricReport,
}

impl GenerationOutputs {
    pub fn from_pair(pair: &MatchPair, cut_frame: usize, ev: &Evaluator) -> Result<Self> {
        let cfg = &pair.trace.config;
        let matchcut = assemble_matchcut(&pair.x_a, &pair.x_b, cut_frame)?;
        let eval = EvalPair {
            id: format!("seed{}-{}", cfg.seed_init, cfg.seed_path),
            x_a: pair.x_a.clone(),
            x_b: pair.x_b.clone(),
            prompt_a: cfg.prompt_a.clone(),
            prompt_b: cfg.prompt_b.clone(),
            tracklet_a: None,
            tracklet_b: None,
            config_hash: Some(content_hash(cfg)?),
        };
        let report = evaluate_pairs(&[eval], ev)?;
        Ok(Self { x_a: pair.x_a.clone(), x_b: pair.x_b.clone(), matchcut, report })
    }

    /// Encoded bytes of each artifact, in [`ARTIFACTS`] order.
    pub fn encode(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        Ok(vec![
            ("x_a.png", encode_apng(&self.x_a.clamp01())?),
            ("x_b.png", encode_apng(&self.x_b.clamp01())?),
            ("matchcut.png", encode_apng(&self.matchcut.clamp01())?),
            ("report.json", serde_json::to_vec_pretty(&self.report)?),
        ])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (file, bytes) in self.encode()? {
            std::fs::write(dir.join(file), bytes)?;
        }
        Ok(())
    }
}
