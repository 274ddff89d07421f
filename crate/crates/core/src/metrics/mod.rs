//! Evaluation of match-cut pairs: prompt adherence, motion consistency,
//! perceptual distance and SSIM between the two branches.

mod motion;
mod perceptual;
pub mod probe;
mod ssim;

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

pub use motion::{motion_consistency, track_centroids};
pub use perceptual::{PerceptualScorer, PyramidProxy};
pub use probe::{train_probe, AdherenceProbe, AdherenceScorer, ProbeConfig, ProbeManifest, ProbeTrainConfig};
pub use ssim::{ssim, ssim_with, SsimConfig};

use crate::backbone::PromptSpec;
use crate::error::{Error, Result};
use crate::toydata::Tracklet;
use crate::video::PixelVideo;

/// The scorers used by [`evaluate_pairs`].
#[derive(Clone)]
pub struct Evaluator {
    pub adherence: Arc<dyn AdherenceScorer>,
    pub perceptual: Arc<dyn PerceptualScorer>,
    pub ssim: SsimConfig,
}

impl Evaluator {
    /// Bundled adherence probe, pyramid perceptual proxy, default SSIM.
    pub fn toy() -> Result<Self> {
        static PROBE: OnceLock<std::result::Result<Arc<AdherenceProbe>, String>> = OnceLock::new();
        let probe = PROBE
            .get_or_init(|| AdherenceProbe::bundled().map(Arc::new).map_err(|e| e.to_string()))
            .clone()
            .map_err(|e| Error::Missing(format!("bundled adherence probe ({e})")))?;
        Ok(Self::new(probe))
    }

    pub fn new(adherence: Arc<dyn AdherenceScorer>) -> Self {
        Self { adherence, perceptual: Arc::new(PyramidProxy::default()), ssim: SsimConfig::default() }
    }
}

/// One pair to score. Missing tracklets are estimated with [`track_centroids`].
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub x_a: PixelVideo,
    pub x_b: PixelVideo,
    pub prompt_a: PromptSpec,
    pub prompt_b: PromptSpec,
    pub tracklet_a: Option<Tracklet>,
    pub tracklet_b: Option<Tracklet>,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair: String,
    pub adherence_a: f64,
    pub adherence_b: f64,
    pub adherence_mean: f64,
    pub motion_consistency: f64,
    pub perceptual_distance: f64,
    pub ssim: f64,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub adherence_a: Stat,
    pub adherence_b: Stat,
    pub adherence_mean: Stat,
    pub motion_consistency: Stat,
    pub perceptual_distance: Stat,
    pub ssim: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Distinct generation-config hashes of the scored pairs, sorted.
    pub config_hashes: Vec<String>,
    pub adherence_scorer: String,
    pub perceptual_scorer: String,
    pub ssim: SsimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
    pub aggregate: Aggregate,
    pub provenance: Provenance,
}

pub const CSV_HEADER: &str = "pair,adherence_a,adherence_b,adherence_mean,motion_consistency,perceptual_distance,ssim";

impl MetricReport {
    /// One row per pair, then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for p in &self.pairs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&p.pair),
                p.adherence_a,
                p.adherence_b,
                p.adherence_mean,
                p.motion_consistency,
                p.perceptual_distance,
                p.ssim
            ));
        }
        let a = &self.aggregate;
        let stats = [a.adherence_a, a.adherence_b, a.adherence_mean, a.motion_consistency, a.perceptual_distance, a.ssim];
        for (label, pick) in [("mean", (|s: &Stat| s.mean) as fn(&Stat) -> f64), ("std", |s: &Stat| s.std)] {
            out.push_str(label);
            for s in &stats {
                out.push_str(&format!(",{}", pick(s)));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, json_path: &std::path::Path, csv_path: &std::path::Path) -> Result<()> {
        std::fs::write(json_path, serde_json::to_vec_pretty(self)?)?;
        std::fs::write(csv_path, self.to_csv())?;
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Scores one pair. Videos are clamped to `[0, 1]` first.
pub fn evaluate_pair(pair: &EvalPair, ev: &Evaluator) -> Result<PairMetrics> {
    let (a, b) = (pair.x_a.clamp01(), pair.x_b.clamp01());
    a.ensure_same_shape(&b)?;
    let adherence_a = ev.adherence.score(&a, &pair.prompt_a)?;
    let adherence_b = ev.adherence.score(&b, &pair.prompt_b)?;
    let ta = pair.tracklet_a.clone().unwrap_or_else(|| track_centroids(&a));
    let tb = pair.tracklet_b.clone().unwrap_or_else(|| track_centroids(&b));
    let m = PairMetrics {
        pair: pair.id.clone(),
        adherence_a,
        adherence_b,
        adherence_mean: 0.5 * (adherence_a + adherence_b),
        motion_consistency: motion_consistency(&ta, &tb)?,
        perceptual_distance: ev.perceptual.distance(&a, &b)?,
        ssim: ssim_with(&a, &b, &ev.ssim)?,
    };
    let values = [m.adherence_a, m.adherence_b, m.motion_consistency, m.perceptual_distance, m.ssim];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { phase: format!("metrics for pair {}", pair.id), iteration: 0 });
    }
    Ok(m)
}

pub fn aggregate(rows: &[PairMetrics]) -> Result<Aggregate> {
    if rows.is_empty() {
        return Err(Error::invalid("pairs", "nothing to aggregate"));
    }
    let col = |f: fn(&PairMetrics) -> f64| Stat::of(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(Aggregate {
        adherence_a: col(|r| r.adherence_a),
        adherence_b: col(|r| r.adherence_b),
        adherence_mean: col(|r| r.adherence_mean),
        motion_consistency: col(|r| r.motion_consistency),
        perceptual_distance: col(|r| r.perceptual_distance),
        ssim: col(|r| r.ssim),
    })
}

pub fn evaluate_pairs(pairs: &[EvalPair], ev: &Evaluator) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("pairs", "no pairs to evaluate"));
    }
    let rows = pairs.iter().map(|p| evaluate_pair(p, ev)).collect::<Result<Vec<_>>>()?;
    report_from_rows(rows, pairs.iter().filter_map(|p| p.config_hash.clone()).collect(), ev)
}

/// Builds a report from already-scored rows.
pub fn report_from_rows(rows: Vec<PairMetrics>, mut config_hashes: Vec<String>, ev: &Evaluator) -> Result<MetricReport> {
    config_hashes.sort();
    config_hashes.dedup();
    Ok(MetricReport {
        aggregate: aggregate(&rows)?,
        pairs: rows,
        provenance: Provenance {
            config_hashes,
            adherence_scorer: ev.adherence.name().to_string(),
            perceptual_scorer: ev.perceptual.name().to_string(),
            ssim: ev.ssim,
        },
    })
}
