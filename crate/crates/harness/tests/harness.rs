use std::sync::Arc;

use matchcut_core::backbone::{BackboneChoice, FnDenoiser, IdentityCodec, PromptSpec};
use matchcut_core::forksampler::{Branch, Engine, ForkConfig, ForkSampler};
use matchcut_core::intervene::{ImageRef, InterventionSpec, Payload, Transform};
use matchcut_core::schedule::ScheduleSpec;
use matchcut_core::{Video, VideoShape};
use matchcut_harness::baselines::v2v_start;
use matchcut_harness::experiment::{check_trend, Direction, Expectation};
use matchcut_harness::{
    assemble_matchcut, baseline_lower_bound, baseline_v2v, run_experiment, ExperimentReport, ExperimentSpec, GenerationOutputs, Method, Sweep,
};

fn numbered(frames: usize, offset: f32) -> Video {
    let s = VideoShape::new(frames, 3, 2, 2);
    Video::from_vec(s, (0..s.len()).map(|i| (i / s.frame_len()) as f32 + offset).collect()).unwrap()
}

#[test]
fn matchcut_takes_head_of_a_and_tail_of_b() {
    let (a, b) = (numbered(40, 0.0), numbered(40, 100.0));
    let m = assemble_matchcut(&a, &b, 20).unwrap();
    for f in 0..40 {
        let want = if f < 20 { f as f32 } else { f as f32 + 100.0 };
        assert_eq!(m.at(f, 0, 0, 0), want);
    }
    let m = assemble_matchcut(&numbered(2, 0.0), &numbered(2, 100.0), 1).unwrap();
    assert_eq!((m.at(0, 0, 0, 0), m.at(1, 0, 0, 0)), (0.0, 101.0));
    assert!(assemble_matchcut(&a, &a, 7).unwrap().bit_eq(&a));
}

#[test]
fn matchcut_rejects_bad_cuts() {
    let a = numbered(4, 0.0);
    for cut in [0, 4, 9] {
        assert_eq!(assemble_matchcut(&a, &a, cut).unwrap_err().field(), Some("cut_frame"));
    }
    assert!(assemble_matchcut(&a, &numbered(5, 0.0), 2).is_err());
}

/// A small deterministic stand-in backbone whose prediction depends on the prompt.
fn engine() -> Engine {
    let model = FnDenoiser::new("affine", |z: &Video, p: &PromptSpec, t| {
        let k = 0.1 + 0.05 * p.class_id.unwrap_or(7) as f32 + 0.002 * t.0 as f32;
        Ok(z.map(|v| k * v + 0.01))
    });
    Engine::new(Arc::new(model), Arc::new(IdentityCodec::rgb()))
}

fn small_config() -> ForkConfig {
    ForkConfig {
        schedule: ScheduleSpec { num_steps: 10, ..ScheduleSpec::default() },
        joint_steps: 3,
        frames: 4,
        height: 32,
        width: 32,
        seed_init: 5,
        seed_path: 6,
        backbone: BackboneChoice::Zero,
        ..ForkConfig::default()
    }
}

/// The bundled toy backbone on short, small clips.
fn toy_config() -> ForkConfig {
    ForkConfig { frames: 4, height: 32, width: 32, joint_steps: 20, seed_init: 5, seed_path: 6, ..ForkConfig::default() }
}

#[test]
fn lower_bound_is_deterministic_and_uses_distinct_seeds() {
    let e = engine();
    let s = ForkSampler::new(&e, &small_config()).unwrap();
    let (a1, b1) = baseline_lower_bound(&s).unwrap();
    let (a2, b2) = baseline_lower_bound(&s).unwrap();
    assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
    assert!(!a1.bit_eq(&b1));
    // With the same prompt on both sides the outputs still differ: the seeds do.
    let same = ForkConfig { prompt_b: PromptSpec::toy(0), ..small_config() };
    let s = ForkSampler::new(&e, &same).unwrap();
    let (a, b) = baseline_lower_bound(&s).unwrap();
    assert!(!a.bit_eq(&b));
}

#[test]
fn v2v_boundaries() {
    let e = engine();
    let cfg = small_config();
    let s = ForkSampler::new(&e, &cfg).unwrap();
    let (a0, b0) = baseline_v2v(&s, 0, 9).unwrap();
    assert!(a0.bit_eq(&b0), "no injected noise leaves the input unchanged");

    let (a_t, b_t) = baseline_v2v(&s, 10, 9).unwrap();
    assert!(a_t.bit_eq(&a0));
    let z_a = s.generate_single_latent(&cfg.prompt_a, cfg.seed_init, Branch::A).unwrap();
    let z = v2v_start(&s, &z_a, 10, 9).unwrap();
    let (fresh, _) = s.disjoint_phase(&z, &cfg.prompt_b, Branch::B, 0).unwrap();
    assert!(b_t.bit_eq(&fresh));
    assert_eq!(baseline_v2v(&s, 11, 9).unwrap_err().field(), Some("noise_level"));
}

#[test]
fn generation_outputs_hold_the_four_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let e = Engine::for_config(&cfg).unwrap();
    let pair = ForkSampler::new(&e, &cfg).unwrap().generate_match_pair().unwrap();
    let out = GenerationOutputs::from_pair(&pair, 2, &matchcut_core::metrics::Evaluator::toy().unwrap()).unwrap();
    out.write(dir.path()).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["matchcut.png", "report.json", "x_a.png", "x_b.png"]);
    let again = GenerationOutputs::from_pair(&pair, 2, &matchcut_core::metrics::Evaluator::toy().unwrap()).unwrap();
    assert_eq!(out.encode().unwrap(), again.encode().unwrap());
}

#[test]
fn spec_json_shape() {
    let spec: ExperimentSpec =
        serde_json::from_str(r#"{"kind":"k_sweep","grid":[0,5,10],"base":{"joint_steps":3},"pairs":2,"out_dir":"runs/k"}"#).unwrap();
    assert_eq!(spec.sweep, Sweep::KSweep(vec![0, 5, 10]));
    assert_eq!(spec.pairs, 2);
    let v = serde_json::to_value(&spec).unwrap();
    assert_eq!(v["kind"], "k_sweep");
    let back: ExperimentSpec = serde_json::from_value(v).unwrap();
    assert_eq!(back, spec);
    let single: ExperimentSpec = serde_json::from_str(r#"{"kind":"single","base":{},"out_dir":"x"}"#).unwrap();
    assert_eq!(single.sweep, Sweep::Single);
    let b: ExperimentSpec = serde_json::from_str(
        r#"{"kind":"baseline_compare","grid":[{"method":"fork"},{"method":"v2v","noise_level":5,"noise_seed":1}],"base":{},"out_dir":"x"}"#,
    )
    .unwrap();
    assert_eq!(b.sweep, Sweep::BaselineCompare(vec![Method::Fork, Method::V2v { noise_level: 5, noise_seed: 1 }]));
}

#[test]
fn spec_validation() {
    let base = small_config();
    let bad = |sweep: Sweep| ExperimentSpec::new(sweep, base.clone(), 1, "unused").validate().unwrap_err();
    assert_eq!(bad(Sweep::KSweep(vec![])).field(), Some("grid"));
    assert_eq!(bad(Sweep::KSweep(vec![0, 11])).field(), Some("grid"));
    assert_eq!(bad(Sweep::CfgSweep(vec![-1.0])).field(), Some("grid"));
    let mut spec = ExperimentSpec::new(Sweep::Single, base.clone(), 0, "unused");
    assert_eq!(spec.validate().unwrap_err().field(), Some("pairs"));
    spec.pairs = 1;
    spec.cut_frame = Some(4);
    assert_eq!(spec.validate().unwrap_err().field(), Some("cut_frame"));
}

#[test]
fn trend_check() {
    let e = Expectation { metric: "ssim".into(), direction: Direction::Increasing, tolerance: 0.02 };
    assert!(check_trend(&[0.1, 0.3, 0.29, 0.5], &e));
    assert!(!check_trend(&[0.1, 0.3, 0.2, 0.5], &e));
    assert!(!check_trend(&[0.3, 0.3], &e));
    let d = Expectation { direction: Direction::Decreasing, ..e };
    assert!(check_trend(&[0.9, 0.8, 0.81], &d));
}

fn modified(path: &std::path::Path) -> std::time::SystemTime {
    std::fs::metadata(path).unwrap().modified().unwrap()
}

#[test]
fn k_sweep_boundaries_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k");
    let spec = ExperimentSpec::new(Sweep::KSweep(vec![0, 50]), toy_config(), 2, &out);
    let r = run_experiment(&spec).unwrap();
    assert!(r.succeeded());
    let ssim = r.means("ssim");
    assert!(ssim[0].unwrap() < 1.0);
    assert!((ssim[1].unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(r.points[1].report.as_ref().unwrap().aggregate.perceptual_distance.mean, 0.0);
    for f in ["spec.json", "report.json", "pairs.csv", "summary.csv", "plots/ssim.svg", "contact_sheets/00_K_0.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(out.join("pairs.csv")).unwrap().lines().count(), 1 + 4);

    // Finished spec: nothing is touched.
    let stamp = modified(&out.join("report.json"));
    let again = run_experiment(&spec).unwrap();
    assert_eq!(again, r);
    assert_eq!(modified(&out.join("report.json")), stamp);

    // Interrupted run: the missing unit is recomputed, the rest reused.
    let victim = out.join("units").join(&r.points[0].units[1]);
    let kept = out.join("units").join(&r.points[0].units[0]).join("unit.json");
    let kept_stamp = modified(&kept);
    std::fs::remove_dir_all(&victim).unwrap();
    std::fs::remove_file(out.join("report.json")).unwrap();
    let resumed = run_experiment(&spec).unwrap();
    assert_eq!(resumed, r);
    assert!(victim.join("unit.json").exists());
    assert_eq!(modified(&kept), kept_stamp);
}

#[test]
fn seed_sweep_produces_distinct_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::new(Sweep::SeedSweep(vec![0, 1, 2, 3, 4]), small_config(), 1, dir.path().join("s"));
    let r = run_experiment(&spec).unwrap();
    assert_eq!(r.points.len(), 5);
    let mut units: Vec<&String> = r.points.iter().flat_map(|p| &p.units).collect();
    assert_eq!(units.len(), 5);
    units.sort();
    units.dedup();
    assert_eq!(units.len(), 5);
    assert!(r.points.iter().all(|p| p.report.as_ref().is_some_and(|r| r.pairs.len() == 1)));
}

#[test]
fn failing_grid_points_are_recorded_and_the_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let bad_mask = InterventionSpec::new(Transform::MaskComposite {
        mask: ImageRef::Inline { channels: 1, height: 2, width: 2, data: vec![1.0; 4] },
        payload: Payload::Color { color: [1.0, 0.0, 0.0] },
    });
    let gamma = InterventionSpec::new(Transform::Gamma { gamma: 2.0 });
    let spec = ExperimentSpec::new(Sweep::InterventionSweep(vec![bad_mask, gamma]), small_config(), 2, dir.path().join("i"));
    let r = run_experiment(&spec).unwrap();
    assert_eq!(r.failures, 2);
    assert!(!r.succeeded());
    assert_eq!(r.points[0].errors.len(), 2);
    assert!(r.points[0].report.is_none());
    let ok = &r.points[1];
    assert!(ok.errors.is_empty());
    let s = ok.extras["ssim_vs_unintervened"].mean;
    assert!(s < 1.0, "gamma changes the output: {s}");
    let on_disk = ExperimentReport::read(&spec.out_dir).unwrap();
    assert_eq!(on_disk, r);
}

#[test]
fn identity_intervention_matches_the_reference() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::new(
        Sweep::InterventionSweep(vec![InterventionSpec::new(Transform::Identity)]),
        small_config(),
        2,
        dir.path().join("id"),
    );
    let r = run_experiment(&spec).unwrap();
    let p = &r.points[0];
    assert!((p.extras["ssim_vs_unintervened"].mean - 1.0).abs() < 1e-9);
    assert_eq!(p.extras["adherence_change"].mean, 0.0);
}

fn point_means(r: &ExperimentReport, metric: &str) -> Vec<f64> {
    r.means(metric).into_iter().map(|m| m.expect("grid point failed")).collect()
}

#[test]
fn lower_bound_shares_less_than_a_partial_fork() {
    let dir = tempfile::tempdir().unwrap();
    let base = ForkConfig { joint_steps: 15, ..toy_config() };
    let spec = ExperimentSpec::new(Sweep::BaselineCompare(vec![Method::Fork, Method::LowerBound]), base, 20, dir.path());
    let r = run_experiment(&spec).unwrap();
    let ssim = point_means(&r, "ssim");
    assert!(ssim[1] < ssim[0], "lower bound {} vs fork {}", ssim[1], ssim[0]);
}

#[test]
fn v2v_keeps_more_of_the_input_when_the_prompt_is_unchanged() {
    let (mut same, mut other) = (0.0, 0.0);
    for seed in 0..10u64 {
        let class = (seed % 3) as u32;
        let cfg = ForkConfig { seed_init: seed, prompt_a: PromptSpec::toy(class), ..toy_config() };
        let e = Engine::for_config(&cfg).unwrap();
        let score = |prompt_b: PromptSpec| {
            let cfg = ForkConfig { prompt_b, ..cfg.clone() };
            let (a, b) = baseline_v2v(&ForkSampler::new(&e, &cfg).unwrap(), 10, seed).unwrap();
            matchcut_core::metrics::ssim(&a, &b).unwrap()
        };
        same += score(PromptSpec::toy(class));
        other += score(PromptSpec::toy((class + 1) % 3));
    }
    assert!(same > other, "same prompt {} vs different prompt {}", same / 10.0, other / 10.0);
}

#[test]
#[ignore = "bundled toy backbone: adherence peaks near scale 9 (0.535, 0.577, 0.599, 0.559)"]
fn stronger_guidance_lowers_adherence() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::new(Sweep::CfgSweep(vec![3.0, 6.0, 9.0, 12.0]), toy_config(), 10, dir.path());
    let e = Expectation { metric: "adherence_mean".into(), direction: Direction::Decreasing, tolerance: 0.02 };
    spec.expect = Some(e.clone());
    let r = run_experiment(&spec).unwrap();
    let means = point_means(&r, "adherence_mean");
    assert!(check_trend(&means, &e), "{means:?}");
    assert_eq!(r.expectation_met, Some(true));
}
