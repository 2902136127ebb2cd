//! Pipeline orchestration behind the `bovae` binary: experiment
//! configuration, synthetic corpora, training stages, sweeps, and plot
//! data emission.

pub mod config;
pub mod plots;
pub mod results;
pub mod stages;
pub mod sweep;
pub mod synth;

pub use config::{ExperimentConfig, Overrides, TaskKind};
pub use stages::{evaluate, infer, pretrain_ae, train_head, train_mapping, StageOutcome, Summary};
pub use sweep::{sweep, SweepReport, SweepRun};
pub use synth::{synth_data, SyntheticTaskSpec};
