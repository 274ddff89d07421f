//! Experiment surface over the fork sampler: match-cut assembly, baselines,
//! config-driven sweeps with resumable on-disk results, and figures.

pub mod assemble;
pub mod baselines;
pub mod experiment;
pub mod plots;
pub mod run;

pub use assemble::{assemble_matchcut, default_cut};
pub use baselines::{baseline_lower_bound, baseline_v2v, Method};
pub use experiment::{run_experiment, run_experiment_with, ExperimentReport, ExperimentSpec, Sweep};
pub use run::{artifact_file, GenerationOutputs, ARTIFACTS};
