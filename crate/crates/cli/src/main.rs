use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use matchcut_core::backbone::codec::{CodecTrainConfig, ConvCodec, ConvCodecConfig};
use matchcut_core::backbone::train::{train_toy_backbone, LossWeight, TrainConfig};
use matchcut_core::backbone::{load_codec, BackboneChoice, CodecChoice, PromptSpec};
use matchcut_core::forksampler::{trace_dir, Engine, ForkConfig, ForkSampler, GenerationTrace};
use matchcut_core::intervene::{InterventionSpec, Staged};
use matchcut_core::io::{content_hash, read_video, write_video};
use matchcut_core::metrics::probe::{train_probe, AdherenceProbe, ProbeTrainConfig};
use matchcut_core::metrics::{evaluate_pairs, EvalPair, Evaluator};
use matchcut_core::toydata::ToyDataset;
use matchcut_harness::plots::{render_contact_sheets, render_plots};
use matchcut_harness::{assemble_matchcut, default_cut, run_experiment_with, ExperimentSpec, GenerationOutputs};
use serde::de::DeserializeOwned;

#[derive(Parser, Debug)]
#[command(name = "matchcut", version, about = "Match-cut video pairs by forked diffusion sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one match pair and write x_a, x_b, the match cut, a metric report and the trace.
    Generate {
        #[command(flatten)]
        config: Box<ConfigArgs>,
        #[arg(long)]
        cut_frame: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply interventions at the fork point of a generate run and finish it.
    Intervene {
        /// Directory written by `generate`.
        #[arg(long)]
        run: PathBuf,
        /// JSON file with one intervention spec or an array applied in order.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        cut_frame: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score video pairs and write metrics.json and metrics.csv.
    Evaluate {
        /// Directories written by `generate` or `intervene`.
        #[arg(long)]
        run: Vec<PathBuf>,
        /// A single pair given as two videos with their prompts.
        #[arg(long, requires_all = ["b", "prompt_a", "prompt_b"])]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long)]
        prompt_a: Option<String>,
        #[arg(long)]
        prompt_b: Option<String>,
        /// Adherence probe directory; the bundled probe by default.
        #[arg(long)]
        probe_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment grid. Exits non-zero if any grid point failed.
    Sweep {
        /// ExperimentSpec JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the spec's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        /// Only redraw plots and contact sheets from an existing report.
        #[arg(long, conflicts_with_all = ["config", "pairs", "workers"], requires = "out")]
        replot: bool,
    },
    /// Cut two videos together: frames before the cut from a, the rest from b.
    Assemble {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        cut_frame: Option<usize>,
        /// A file with an extension is written as APNG, otherwise a PNG directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the session API.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Sessions are stored under <root>/sessions.
        #[arg(long, default_value = "runs/service")]
        root: PathBuf,
        /// Static assets served at / (the studio client).
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Train a toy component and write its weights and manifest.
    TrainToy {
        #[arg(value_enum)]
        target: TrainTarget,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Backbone only: number of training clips.
        #[arg(long, default_value_t = 20000)]
        clips: usize,
        /// Backbone only: weight of the noise-prediction error per timestep.
        #[arg(long, value_enum, default_value_t = WeightArg::Uniform)]
        loss_weight: WeightArg,
        /// Backbone only: train in the latent space of this codec.
        #[arg(long)]
        codec_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TrainTarget {
    Backbone,
    Probe,
    Codec,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightArg {
    Uniform,
    Velocity,
}

/// ForkConfig fields; flags override the JSON given with --config.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// ForkConfig JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Toy class id or text.
    #[arg(long)]
    prompt_a: Option<String>,
    #[arg(long)]
    prompt_b: Option<String>,
    #[arg(long)]
    joint_steps: Option<usize>,
    /// guidance.scale
    #[arg(long)]
    guidance_scale: Option<f32>,
    /// average | linear_decay
    #[arg(long)]
    combine: Option<String>,
    /// per_prompt_then_combine | combine_then_guide
    #[arg(long)]
    cfg_placement: Option<String>,
    /// shared | per_prompt
    #[arg(long)]
    null_evaluation: Option<String>,
    /// schedule.num_steps
    #[arg(long)]
    num_steps: Option<usize>,
    /// schedule.stochasticity
    #[arg(long)]
    stochasticity: Option<f64>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_path: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Toy backbone weights directory; the bundled weights by default.
    #[arg(long, conflicts_with = "zero_backbone")]
    backbone_dir: Option<PathBuf>,
    /// Use the all-zero noise predictor.
    #[arg(long)]
    zero_backbone: bool,
    /// Learned codec directory; pixel space by default.
    #[arg(long)]
    codec_dir: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn enum_arg<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.into())).with_context(|| format!("--{flag}: unknown value {value:?}"))
}

fn prompt_arg(s: &str) -> PromptSpec {
    match s.parse::<u32>() {
        Ok(id) => PromptSpec::toy(id),
        Err(_) => PromptSpec::text(s),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ForkConfig> {
        let mut c = match &self.config {
            Some(p) => read_json(p)?,
            None => ForkConfig::default(),
        };
        if let Some(p) = &self.prompt_a {
            c.prompt_a = prompt_arg(p);
        }
        if let Some(p) = &self.prompt_b {
            c.prompt_b = prompt_arg(p);
        }
        if let Some(v) = self.joint_steps {
            c.joint_steps = v;
        }
        if let Some(v) = self.guidance_scale {
            c.guidance.scale = v;
        }
        if let Some(v) = &self.combine {
            c.combine = enum_arg("combine", v)?;
        }
        if let Some(v) = &self.cfg_placement {
            c.cfg_placement = enum_arg("cfg-placement", v)?;
        }
        if let Some(v) = &self.null_evaluation {
            c.null_evaluation = enum_arg("null-evaluation", v)?;
        }
        if let Some(v) = self.num_steps {
            c.schedule.num_steps = v;
        }
        if let Some(v) = self.stochasticity {
            c.schedule.stochasticity = v;
        }
        for (slot, v) in [(&mut c.seed_init, self.seed_init), (&mut c.seed_path, self.seed_path)] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        for (slot, v) in [(&mut c.frames, self.frames), (&mut c.height, self.height), (&mut c.width, self.width)] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if self.zero_backbone {
            c.backbone = BackboneChoice::Zero;
        } else if let Some(d) = &self.backbone_dir {
            c.backbone = BackboneChoice::Toy { dir: Some(d.clone()) };
        }
        if let Some(d) = &self.codec_dir {
            c.codec = CodecChoice::Conv { dir: d.clone() };
        }
        c.validate()?;
        Ok(c)
    }
}

fn write_run(out: &Path, cfg: &ForkConfig, outputs: &GenerationOutputs, trace: &GenerationTrace) -> Result<()> {
    outputs.write(out)?;
    cfg.to_json_file(&out.join("config.json"))?;
    trace.write_dir(&trace_dir(out))?;
    let a = &outputs.report.aggregate;
    println!(
        "wrote {}: ssim {:.4}  motion {:.4}  perceptual {:.4}  adherence {:.4}",
        out.display(),
        a.ssim.mean,
        a.motion_consistency.mean,
        a.perceptual_distance.mean,
        a.adherence_mean.mean
    );
    Ok(())
}

fn generate(args: &ConfigArgs, cut_frame: Option<usize>, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let engine = Engine::for_config(&cfg)?;
    let pair = ForkSampler::new(&engine, &cfg)?.generate_match_pair()?;
    let outputs = GenerationOutputs::from_pair(&pair, cut_frame.unwrap_or(default_cut(cfg.frames)), &Evaluator::toy()?)?;
    write_run(out, &cfg, &outputs, &pair.trace)
}

fn intervene(run: &Path, spec_path: &Path, cut_frame: Option<usize>, out: &Path) -> Result<()> {
    let cfg = ForkConfig::from_json_file(&run.join("config.json"))?;
    let specs: Vec<InterventionSpec> = match read_json::<serde_json::Value>(spec_path)? {
        serde_json::Value::Array(items) => items.into_iter().map(serde_json::from_value).collect::<Result<_, _>>()?,
        one => vec![serde_json::from_value(one)?],
    };
    if specs.is_empty() {
        bail!("{}: no intervention specs", spec_path.display());
    }
    let engine = Engine::for_config(&cfg)?;
    let sampler = ForkSampler::new(&engine, &cfg)?;
    let trace = GenerationTrace::read_dir(&trace_dir(run))?;
    if trace.config != cfg {
        bail!("{}: trace and config.json disagree", run.display());
    }
    let mut staged = Staged::new(&trace, engine.codec.as_ref())?;
    for spec in &specs {
        staged.apply(spec, &sampler, engine.codec.as_ref())?;
    }
    let pair = staged.finish(&sampler, &trace)?;
    let outputs = GenerationOutputs::from_pair(&pair, cut_frame.unwrap_or(default_cut(cfg.frames)), &Evaluator::toy()?)?;
    write_run(out, &cfg, &outputs, &pair.trace)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    runs: &[PathBuf],
    a: Option<&Path>,
    b: Option<&Path>,
    prompt_a: Option<&str>,
    prompt_b: Option<&str>,
    probe_dir: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut pairs = Vec::new();
    for run in runs {
        let cfg = ForkConfig::from_json_file(&run.join("config.json"))?;
        pairs.push(EvalPair {
            id: run.display().to_string(),
            x_a: read_video(&run.join("x_a.png"))?,
            x_b: read_video(&run.join("x_b.png"))?,
            prompt_a: cfg.prompt_a.clone(),
            prompt_b: cfg.prompt_b.clone(),
            tracklet_a: None,
            tracklet_b: None,
            config_hash: Some(content_hash(&cfg)?),
        });
    }
    if let (Some(a), Some(b), Some(pa), Some(pb)) = (a, b, prompt_a, prompt_b) {
        pairs.push(EvalPair {
            id: format!("{}|{}", a.display(), b.display()),
            x_a: read_video(a)?,
            x_b: read_video(b)?,
            prompt_a: prompt_arg(pa),
            prompt_b: prompt_arg(pb),
            tracklet_a: None,
            tracklet_b: None,
            config_hash: None,
        });
    }
    if pairs.is_empty() {
        bail!("nothing to evaluate: give --run or --a/--b/--prompt-a/--prompt-b");
    }
    let ev = match probe_dir {
        Some(d) => Evaluator::new(std::sync::Arc::new(AdherenceProbe::load(d)?)),
        None => Evaluator::toy()?,
    };
    let report = evaluate_pairs(&pairs, &ev)?;
    std::fs::create_dir_all(out)?;
    report.write(&out.join("metrics.json"), &out.join("metrics.csv"))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn sweep(config: Option<&Path>, out: Option<&Path>, pairs: Option<usize>, workers: Option<usize>, replot: bool) -> Result<bool> {
    if replot {
        let out = out.context("--replot needs --out")?;
        let plots = render_plots(out)?;
        let sheets = render_contact_sheets(out)?;
        println!("wrote {} plots and {} contact sheets", plots.len(), sheets.len());
        return Ok(true);
    }
    let mut spec: ExperimentSpec = read_json(config.context("--config is required")?)?;
    if let Some(o) = out {
        spec.out_dir = o.to_path_buf();
    }
    if let Some(p) = pairs {
        spec.pairs = p;
    }
    if let Some(w) = workers {
        spec.workers = w;
    }
    let report = run_experiment_with(&spec, &Evaluator::toy()?)?;
    for p in &report.points {
        match &p.report {
            Some(r) => {
                let a = &r.aggregate;
                println!(
                    "{:<24} ssim {:.4}  motion {:.4}  perceptual {:.4}  adherence {:.4}  errors {}",
                    p.label,
                    a.ssim.mean,
                    a.motion_consistency.mean,
                    a.perceptual_distance.mean,
                    a.adherence_mean.mean,
                    p.errors.len()
                );
            }
            None => println!("{:<24} failed: {}", p.label, p.errors.join("; ")),
        }
    }
    if let Some(met) = report.expectation_met {
        println!("expectation {}", if met { "met" } else { "not met" });
    }
    println!("report: {}", spec.out_dir.join("report.json").display());
    Ok(report.succeeded())
}

fn assemble(a: &Path, b: &Path, cut_frame: Option<usize>, out: &Path) -> Result<()> {
    let (a, b) = (read_video(a)?, read_video(b)?);
    let m = assemble_matchcut(&a, &b, cut_frame.unwrap_or(default_cut(a.shape().frames)))?;
    write_video(out, &m.clamp01())?;
    Ok(())
}

fn train(
    target: TrainTarget,
    out: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
    batch: Option<usize>,
    clips: usize,
    loss_weight: WeightArg,
    codec_dir: Option<&Path>,
) -> Result<()> {
    match target {
        TrainTarget::Backbone => {
            let codec_choice = codec_dir.map_or(CodecChoice::Identity, |d| CodecChoice::Conv { dir: d.to_path_buf() });
            let codec = load_codec(&codec_choice)?;
            let mut cfg = TrainConfig::default();
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.batch = batch.unwrap_or(cfg.batch);
            cfg.net.channels = codec.latent_channels();
            cfg.loss_weight = match loss_weight {
                WeightArg::Uniform => LossWeight::Uniform,
                WeightArg::Velocity => LossWeight::Velocity,
            };
            let data = ToyDataset::generate(clips, cfg.seed, &cfg.scenes);
            let b = train_toy_backbone(&data, &cfg, codec.as_ref(), &mut |p| tracing::info!(step = p.step, loss = p.loss))?;
            b.save(out)?;
            if let Some(m) = b.manifest() {
                println!("val loss {:.5} (zero predictor {:.5})", m.val_loss, m.zero_baseline_val_loss);
            }
        }
        TrainTarget::Probe => {
            let mut cfg = ProbeTrainConfig::default();
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.batch = batch.unwrap_or(cfg.batch);
            let probe = train_probe(&cfg, &mut |step, loss| tracing::info!(step, loss))?;
            probe.save(out)?;
            if let Some(m) = probe.manifest() {
                println!("val accuracy {:.4}, correct-class score {:.4}", m.val_accuracy, m.val_correct_score);
            }
        }
        TrainTarget::Codec => {
            let mut tc = CodecTrainConfig::default();
            tc.steps = steps.unwrap_or(tc.steps);
            tc.seed = seed.unwrap_or(tc.seed);
            tc.batch_frames = batch.unwrap_or(tc.batch_frames);
            let (codec, manifest) = ConvCodec::train(ConvCodecConfig::default(), &tc, &Default::default())?;
            codec.save(out, &manifest)?;
            println!("held-out MAE {:.5}, tolerance {:.5}", manifest.heldout_mae, manifest.tolerance);
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { config, cut_frame, out } => generate(&config, cut_frame, &out)?,
        Command::Intervene { run, spec, cut_frame, out } => intervene(&run, &spec, cut_frame, &out)?,
        Command::Evaluate { run, a, b, prompt_a, prompt_b, probe_dir, out } => {
            evaluate(&run, a.as_deref(), b.as_deref(), prompt_a.as_deref(), prompt_b.as_deref(), probe_dir.as_deref(), &out)?
        }
        Command::Sweep { config, out, pairs, workers, replot } => {
            return sweep(config.as_deref(), out.as_deref(), pairs, workers, replot);
        }
        Command::Assemble { a, b, cut_frame, out } => assemble(&a, &b, cut_frame, &out)?,
        Command::Serve { host, port, root, static_dir } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(matchcut_service::serve(SocketAddr::new(host, port), &root, static_dir.as_deref()))?;
        }
        Command::TrainToy { target, out, steps, seed, batch, clips, loss_weight, codec_dir } => {
            train(target, &out, steps, seed, batch, clips, loss_weight, codec_dir.as_deref())?
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
