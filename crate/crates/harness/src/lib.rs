//! Experiment driver for the expert-library model: configuration, both
//! training phases, ablation grids, analysis artifacts, and the `ver` CLI.

pub mod ablate;
pub mod analyze;
pub mod config;
pub mod distill;
pub mod error;
pub mod finetune;
pub mod io;
pub mod schedule;

pub use ablate::{run_ablation, AblationSummary, CellStats, ABLATION_KINDS};
pub use analyze::{load_finetuned, run_analyze, AnalyzeSummary};
pub use config::ExperimentConfig;
pub use distill::{run_distill, DistillSummary};
pub use error::{HarnessError, Result};
pub use finetune::{bank_from, load_pretrained, run_finetune, task_from, FinetuneSummary};
pub use schedule::LrSchedule;
