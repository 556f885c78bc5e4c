//! Experiment harness: evaluation metrics, sparsity/size/schedule sweeps,
//! checkpoint persistence, and CSV/SVG result emission.

pub mod checkpoint;
pub mod eval;
pub mod report;
pub mod svg;
pub mod sweep;

pub use checkpoint::{load_checkpoint, load_diffusion, load_vae, save_checkpoint, Model};
pub use eval::{eval_mse_vs_sparsity, eval_reconstruction_mse, spearman, EvalMode};
pub use report::{StepRecord, TrainingReport};
pub use sweep::{compare_schedules, sweep_dataset_size, SweepResult, SweepRow};
