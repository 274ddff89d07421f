//! Config-driven sweeps.
//!
//! A spec expands into grid points, each holding `pairs` generation units.
//! Every unit is content-addressed by its full configuration and stored under
//! `units/<hash>/`; units already on disk are loaded instead of recomputed,
//! so an interrupted run resumes where it stopped and rerunning a finished
//! spec changes nothing. Failures are recorded per grid point and the run
//! continues.
//!
//! Output layout:
//!
//! ```text
//! spec.json            the spec as run
//! report.json          ExperimentReport
//! pairs.csv            one row per (grid point, pair)
//! summary.csv          mean and std per grid point
//! plots/*.svg          metric means against the grid
//! contact_sheets/*.png x_a, match cut and x_b strips of each point's first pair
//! units/<hash>/        x_a.png, x_b.png (animated PNG) and unit.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use matchcut_core::backbone::{GuidanceConfig, PromptKind, PromptSpec};
use matchcut_core::forksampler::{CombineMode, Engine, ForkConfig, ForkSampler};
use matchcut_core::intervene::{inject, InterventionSpec};
use matchcut_core::io::{content_hash, write_apng};
use matchcut_core::metrics::{evaluate_pair, report_from_rows, ssim_with, EvalPair, Evaluator, MetricReport, PairMetrics, Stat};
use matchcut_core::toydata::sample_prompt_pair;
use matchcut_core::{Error, PixelVideo, Result};
use serde::{Deserialize, Serialize};

use crate::assemble::default_cut;
use crate::baselines::{baseline_lower_bound, baseline_v2v, Method};
use crate::plots;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "grid", rename_all = "snake_case")]
pub enum Sweep {
    Single,
    KSweep(Vec<usize>),
    CfgSweep(Vec<f32>),
    FCompare(Vec<CombineMode>),
    SeedSweep(Vec<u64>),
    InterventionSweep(Vec<InterventionSpec>),
    BaselineCompare(Vec<Method>),
}

impl Sweep {
    pub fn kind(&self) -> &'static str {
        match self {
            Sweep::Single => "single",
            Sweep::KSweep(_) => "k_sweep",
            Sweep::CfgSweep(_) => "cfg_sweep",
            Sweep::FCompare(_) => "f_compare",
            Sweep::SeedSweep(_) => "seed_sweep",
            Sweep::InterventionSweep(_) => "intervention_sweep",
            Sweep::BaselineCompare(_) => "baseline_compare",
        }
    }

    fn len(&self) -> usize {
        match self {
            Sweep::Single => 1,
            Sweep::KSweep(g) => g.len(),
            Sweep::CfgSweep(g) => g.len(),
            Sweep::FCompare(g) => g.len(),
            Sweep::SeedSweep(g) => g.len(),
            Sweep::InterventionSweep(g) => g.len(),
            Sweep::BaselineCompare(g) => g.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increasing,
    Decreasing,
}

/// A trend registered before the run: the metric's mean moves in `direction`
/// from the first grid point to the last, and no adjacent step goes the
/// other way by more than `tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub metric: String,
    pub direction: Direction,
    pub tolerance: f64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(flatten)]
    pub sweep: Sweep,
    pub base: ForkConfig,
    #[serde(default = "one")]
    pub pairs: usize,
    /// Pair `i` draws its toy prompts from `sample_prompt_pair(prompt_seed + i)`.
    #[serde(default)]
    pub prompt_seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub cut_frame: Option<usize>,
    #[serde(default)]
    pub expect: Option<Expectation>,
    #[serde(default = "one")]
    pub workers: usize,
}

impl ExperimentSpec {
    pub fn new(sweep: Sweep, base: ForkConfig, pairs: usize, out_dir: impl Into<PathBuf>) -> Self {
        Self { sweep, base, pairs, prompt_seed: 0, out_dir: out_dir.into(), cut_frame: None, expect: None, workers: 1 }
    }

    pub fn cut(&self) -> usize {
        self.cut_frame.unwrap_or_else(|| default_cut(self.base.frames))
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.pairs == 0 {
            return Err(Error::invalid("pairs", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers", "must be at least 1"));
        }
        if self.sweep.len() == 0 {
            return Err(Error::invalid("grid", "must not be empty"));
        }
        let n = self.base.frames;
        let cut = self.cut();
        if cut == 0 || cut >= n {
            return Err(Error::invalid("cut_frame", format!("must be in 1..{n}, got {cut}")));
        }
        let total = self.base.total_steps();
        match &self.sweep {
            Sweep::KSweep(g) => {
                if let Some(k) = g.iter().find(|&&k| k > total) {
                    return Err(Error::invalid("grid", format!("K = {k} exceeds T = {total}")));
                }
            }
            Sweep::CfgSweep(g) => {
                for &s in g {
                    GuidanceConfig { scale: s }.validate().map_err(|e| Error::invalid("grid", e.to_string()))?;
                }
            }
            Sweep::InterventionSweep(g) => {
                for s in g {
                    s.validate(None)?;
                }
            }
            Sweep::BaselineCompare(g) => {
                for m in g {
                    if let Method::V2v { noise_level, .. } = m {
                        if *noise_level > total {
                            return Err(Error::invalid("grid", format!("noise_level {noise_level} exceeds T = {total}")));
                        }
                    }
                }
            }
            Sweep::Single | Sweep::FCompare(_) | Sweep::SeedSweep(_) => {}
        }
        if let Some(e) = &self.expect {
            if !METRIC_COLUMNS.contains(&e.metric.as_str()) && !EXTRA_COLUMNS.contains(&e.metric.as_str()) {
                return Err(Error::invalid("expect.metric", format!("unknown metric {}", e.metric)));
            }
            if !(e.tolerance.is_finite() && e.tolerance >= 0.0) {
                return Err(Error::invalid("expect.tolerance", "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        content_hash(self)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub const METRIC_COLUMNS: [&str; 6] =
    ["adherence_a", "adherence_b", "adherence_mean", "motion_consistency", "perceptual_distance", "ssim"];

/// Intervention sweeps compare each intervened pair with the unintervened run.
pub const EXTRA_COLUMNS: [&str; 2] = ["ssim_vs_unintervened", "adherence_change"];

pub fn metric_value(m: &PairMetrics, name: &str) -> Option<f64> {
    Some(match name {
        "adherence_a" => m.adherence_a,
        "adherence_b" => m.adherence_b,
        "adherence_mean" => m.adherence_mean,
        "motion_consistency" => m.motion_consistency,
        "perceptual_distance" => m.perceptual_distance,
        "ssim" => m.ssim,
        _ => return None,
    })
}

/// What a unit computes besides plain fork sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
enum Variant {
    Fork,
    Baseline { method: Method },
    Intervention { spec: InterventionSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct UnitKey {
    config: ForkConfig,
    variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub hash: String,
    pub pair: usize,
    pub config: ForkConfig,
    pub metrics: PairMetrics,
    #[serde(default)]
    pub extras: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub label: String,
    pub value: serde_json::Value,
    pub units: Vec<String>,
    pub report: Option<MetricReport>,
    #[serde(default)]
    pub extras: BTreeMap<String, Stat>,
    #[serde(default)]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec_hash: String,
    pub spec: ExperimentSpec,
    pub points: Vec<PointReport>,
    pub expectation_met: Option<bool>,
    pub failures: usize,
}

impl ExperimentReport {
    pub fn succeeded(&self) -> bool {
        self.failures == 0
    }

    /// Mean of `metric` at each grid point; `None` where the point failed.
    pub fn means(&self, metric: &str) -> Vec<Option<f64>> {
        self.points
            .iter()
            .map(|p| {
                if let Some(s) = p.extras.get(metric) {
                    return Some(s.mean);
                }
                let r = p.report.as_ref()?;
                let a = &r.aggregate;
                Some(match metric {
                    "adherence_a" => a.adherence_a.mean,
                    "adherence_b" => a.adherence_b.mean,
                    "adherence_mean" => a.adherence_mean.mean,
                    "motion_consistency" => a.motion_consistency.mean,
                    "perceptual_distance" => a.perceptual_distance.mean,
                    "ssim" => a.ssim.mean,
                    _ => return None,
                })
            })
            .collect()
    }

    pub fn read(out_dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(out_dir.join("report.json"))?)?)
    }
}

/// Checks a trend over grid-point means.
pub fn check_trend(means: &[f64], e: &Expectation) -> bool {
    if means.len() < 2 {
        return true;
    }
    let sign = match e.direction {
        Direction::Increasing => 1.0,
        Direction::Decreasing => -1.0,
    };
    let steps_ok = means.windows(2).all(|w| sign * (w[1] - w[0]) >= -e.tolerance);
    steps_ok && sign * (means[means.len() - 1] - means[0]) > 0.0
}

struct Point {
    label: String,
    value: serde_json::Value,
    units: Vec<(usize, ForkConfig, Variant)>,
}

fn pair_config(spec: &ExperimentSpec, base: &ForkConfig, i: usize, seed_offset: u64) -> ForkConfig {
    let mut cfg = base.clone();
    if cfg.prompt_a.kind == PromptKind::ToyClass && cfg.prompt_b.kind == PromptKind::ToyClass {
        let (a, b) = sample_prompt_pair(spec.prompt_seed.wrapping_add(i as u64));
        cfg.prompt_a = PromptSpec::toy(a.class_id);
        cfg.prompt_b = PromptSpec::toy(b.class_id);
    }
    cfg.seed_init = base.seed_init.wrapping_add(seed_offset).wrapping_add(i as u64);
    cfg.seed_path = base.seed_path.wrapping_add(seed_offset).wrapping_add(i as u64);
    cfg
}

fn expand(spec: &ExperimentSpec) -> Result<Vec<Point>> {
    let pairs = |base: &ForkConfig, seed_offset: u64, variant: Variant| -> Vec<(usize, ForkConfig, Variant)> {
        (0..spec.pairs).map(|i| (i, pair_config(spec, base, i, seed_offset), variant.clone())).collect()
    };
    let base = &spec.base;
    let mut out = Vec::new();
    match &spec.sweep {
        Sweep::Single => out.push(Point { label: "single".into(), value: serde_json::Value::Null, units: pairs(base, 0, Variant::Fork) }),
        Sweep::KSweep(g) => {
            for &k in g {
                let cfg = ForkConfig { joint_steps: k, ..base.clone() };
                out.push(Point { label: format!("K={k}"), value: k.into(), units: pairs(&cfg, 0, Variant::Fork) });
            }
        }
        Sweep::CfgSweep(g) => {
            for &s in g {
                let cfg = ForkConfig { guidance: GuidanceConfig { scale: s }, ..base.clone() };
                out.push(Point { label: format!("cfg={s}"), value: serde_json::to_value(s)?, units: pairs(&cfg, 0, Variant::Fork) });
            }
        }
        Sweep::FCompare(g) => {
            for &f in g {
                let cfg = ForkConfig { combine: f, ..base.clone() };
                let v = serde_json::to_value(f)?;
                let label = v.as_str().unwrap_or("combine").to_string();
                out.push(Point { label, value: v, units: pairs(&cfg, 0, Variant::Fork) });
            }
        }
        Sweep::SeedSweep(g) => {
            for &s in g {
                out.push(Point { label: format!("seed={s}"), value: s.into(), units: pairs(base, s, Variant::Fork) });
            }
        }
        Sweep::InterventionSweep(g) => {
            for (j, s) in g.iter().enumerate() {
                let v = serde_json::to_value(s)?;
                let kind = v.get("kind").and_then(|k| k.as_str()).unwrap_or("intervention").to_string();
                out.push(Point { label: format!("{j}_{kind}"), value: v, units: pairs(base, 0, Variant::Intervention { spec: s.clone() }) });
            }
        }
        Sweep::BaselineCompare(g) => {
            for m in g {
                let variant = if *m == Method::Fork { Variant::Fork } else { Variant::Baseline { method: *m } };
                out.push(Point { label: m.label(), value: serde_json::to_value(m)?, units: pairs(base, 0, variant) });
            }
        }
    }
    Ok(out)
}

fn unit_hash(cfg: &ForkConfig, variant: &Variant) -> Result<String> {
    Ok(content_hash(&UnitKey { config: cfg.clone(), variant: variant.clone() })?[..20].to_string())
}

pub fn unit_dir(out_dir: &Path, hash: &str) -> PathBuf {
    out_dir.join("units").join(hash)
}

/// Writes `bytes` via a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_unit(dir: &Path) -> Option<UnitRecord> {
    let bytes = std::fs::read(dir.join("unit.json")).ok()?;
    let rec: UnitRecord = serde_json::from_slice(&bytes).ok()?;
    (dir.join("x_a.png").exists() && dir.join("x_b.png").exists()).then_some(rec)
}

fn store_unit(dir: &Path, rec: &UnitRecord, x_a: &PixelVideo, x_b: &PixelVideo) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_apng(&dir.join("x_a.png"), &x_a.clamp01())?;
    write_apng(&dir.join("x_b.png"), &x_b.clamp01())?;
    write_atomic(&dir.join("unit.json"), &serde_json::to_vec_pretty(rec)?)
}

struct Runner<'a> {
    engine: &'a Engine,
    ev: &'a Evaluator,
    out_dir: &'a Path,
}

impl Runner<'_> {
    fn score(&self, pair: usize, cfg: &ForkConfig, x_a: &PixelVideo, x_b: &PixelVideo) -> Result<PairMetrics> {
        let ep = EvalPair {
            id: format!("p{pair}"),
            x_a: x_a.clone(),
            x_b: x_b.clone(),
            prompt_a: cfg.prompt_a.clone(),
            prompt_b: cfg.prompt_b.clone(),
            tracklet_a: None,
            tracklet_b: None,
            config_hash: Some(content_hash(cfg)?),
        };
        evaluate_pair(&ep, self.ev)
    }

    fn unit(&self, pair: usize, cfg: &ForkConfig, variant: &Variant) -> Result<UnitRecord> {
        let hash = unit_hash(cfg, variant)?;
        let dir = unit_dir(self.out_dir, &hash);
        if let Some(rec) = load_unit(&dir) {
            return Ok(rec);
        }
        let sampler = ForkSampler::new(self.engine, cfg)?;
        let mut extras = BTreeMap::new();
        let (x_a, x_b) = match variant {
            Variant::Fork => {
                let p = sampler.generate_match_pair()?;
                (p.x_a, p.x_b)
            }
            Variant::Baseline { method } => match *method {
                Method::Fork => unreachable!("fork baseline is expanded as a plain fork unit"),
                Method::LowerBound => baseline_lower_bound(&sampler)?,
                Method::V2v { noise_level, noise_seed } => baseline_v2v(&sampler, noise_level, noise_seed)?,
            },
            Variant::Intervention { spec } => {
                let reference = sampler.generate_match_pair()?;
                let ref_hash = unit_hash(cfg, &Variant::Fork)?;
                let ref_dir = unit_dir(self.out_dir, &ref_hash);
                let ref_metrics = match load_unit(&ref_dir) {
                    Some(r) => r.metrics,
                    None => {
                        let m = self.score(pair, cfg, &reference.x_a, &reference.x_b)?;
                        let rec = UnitRecord { hash: ref_hash, pair, config: cfg.clone(), metrics: m.clone(), extras: BTreeMap::new() };
                        store_unit(&ref_dir, &rec, &reference.x_a, &reference.x_b)?;
                        m
                    }
                };
                let p = inject(&reference.trace, spec, &sampler, self.engine.codec.as_ref())?;
                let (ca, cb) = (p.x_a.clamp01(), p.x_b.clamp01());
                let s = 0.5
                    * (ssim_with(&ca, &reference.x_a.clamp01(), &self.ev.ssim)?
                        + ssim_with(&cb, &reference.x_b.clamp01(), &self.ev.ssim)?);
                let m = self.score(pair, cfg, &p.x_a, &p.x_b)?;
                extras.insert("ssim_vs_unintervened".to_string(), s);
                extras.insert("adherence_change".to_string(), m.adherence_mean - ref_metrics.adherence_mean);
                (p.x_a, p.x_b)
            }
        };
        let metrics = self.score(pair, cfg, &x_a, &x_b)?;
        let rec = UnitRecord { hash, pair, config: cfg.clone(), metrics, extras };
        store_unit(&dir, &rec, &x_a, &x_b)?;
        Ok(rec)
    }
}

/// Runs `spec` with the bundled toy evaluator.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_experiment_with(spec, &Evaluator::toy()?)
}

pub fn run_experiment_with(spec: &ExperimentSpec, ev: &Evaluator) -> Result<ExperimentReport> {
    spec.validate()?;
    let out = &spec.out_dir;
    let spec_hash = spec.hash()?;
    if let Ok(prev) = ExperimentReport::read(out) {
        if prev.spec_hash == spec_hash && prev.succeeded() {
            return Ok(prev);
        }
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("spec.json"), serde_json::to_vec_pretty(spec)?)?;
    let engine = Engine::for_config(&spec.base)?;
    let points = expand(spec)?;
    let runner = Runner { engine: &engine, ev, out_dir: out };

    let jobs: Vec<(usize, usize)> = points.iter().enumerate().flat_map(|(p, pt)| (0..pt.units.len()).map(move |u| (p, u))).collect();
    let results: Mutex<BTreeMap<(usize, usize), Result<UnitRecord>>> = Mutex::new(BTreeMap::new());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let j = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(p, u)) = jobs.get(j) else { break };
        let (pair, cfg, variant) = &points[p].units[u];
        let r = runner.unit(*pair, cfg, variant);
        results.lock().expect("result lock").insert((p, u), r);
    };
    std::thread::scope(|s| {
        for _ in 1..spec.workers.min(jobs.len().max(1)) {
            s.spawn(work);
        }
        work();
    });
    let mut results = results.into_inner().expect("result lock");

    let mut reports = Vec::with_capacity(points.len());
    let mut failures = 0;
    for (p, pt) in points.iter().enumerate() {
        let mut rows = Vec::new();
        let mut hashes = Vec::new();
        let mut config_hashes = Vec::new();
        let mut extras: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut errors = Vec::new();
        for u in 0..pt.units.len() {
            match results.remove(&(p, u)).expect("every job ran") {
                Ok(rec) => {
                    config_hashes.push(content_hash(&rec.config)?);
                    hashes.push(rec.hash.clone());
                    for (k, v) in &rec.extras {
                        extras.entry(k.clone()).or_default().push(*v);
                    }
                    rows.push(rec.metrics);
                }
                Err(e) => errors.push(format!("pair {}: {e}", pt.units[u].0)),
            }
        }
        failures += errors.len();
        let report = if rows.is_empty() { None } else { Some(report_from_rows(rows, config_hashes, ev)?) };
        reports.push(PointReport {
            label: pt.label.clone(),
            value: pt.value.clone(),
            units: hashes,
            report,
            extras: extras.into_iter().map(|(k, v)| (k, Stat::of(&v))).collect(),
            errors,
        });
    }
    let mut report = ExperimentReport { spec_hash, spec: spec.clone(), points: reports, expectation_met: None, failures };
    if let Some(e) = &spec.expect {
        let means: Option<Vec<f64>> = report.means(&e.metric).into_iter().collect();
        report.expectation_met = Some(means.is_some_and(|m| check_trend(&m, e)));
    }
    write_tables(out, &report)?;
    write_atomic(&out.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
    plots::render_plots(out)?;
    plots::render_contact_sheets(out)?;
    Ok(report)
}

fn write_tables(out: &Path, r: &ExperimentReport) -> Result<()> {
    let mut pairs = format!("point,{}\n", matchcut_core::metrics::CSV_HEADER);
    let mut summary = String::from("point,n,failed");
    for m in METRIC_COLUMNS.iter().chain(&EXTRA_COLUMNS) {
        summary.push_str(&format!(",{m}_mean,{m}_std"));
    }
    summary.push('\n');
    for p in &r.points {
        let n = p.report.as_ref().map_or(0, |r| r.pairs.len());
        summary.push_str(&format!("{},{},{}", p.label, n, p.errors.len()));
        if let Some(rep) = &p.report {
            for line in rep.to_csv().lines().skip(1).take(rep.pairs.len()) {
                pairs.push_str(&format!("{},{}\n", p.label, line));
            }
            let a = &rep.aggregate;
            for s in [a.adherence_a, a.adherence_b, a.adherence_mean, a.motion_consistency, a.perceptual_distance, a.ssim] {
                summary.push_str(&format!(",{},{}", s.mean, s.std));
            }
        } else {
            summary.push_str(&",,".repeat(METRIC_COLUMNS.len()));
        }
        for m in EXTRA_COLUMNS {
            match p.extras.get(m) {
                Some(s) => summary.push_str(&format!(",{},{}", s.mean, s.std)),
                None => summary.push_str(",,"),
            }
        }
        summary.push('\n');
    }
    std::fs::write(out.join("pairs.csv"), pairs)?;
    std::fs::write(out.join("summary.csv"), summary)?;
    Ok(())
}
