//! Metrics, prompt sampling, statistics and the ablation/prompt grid.

pub mod grid;
pub mod metrics;
pub mod overlay;
pub mod prompts;
pub mod stats;

pub use grid::{cell_model, evaluate_cell, 
    checkpoint_path, config_hash, mean_std, run_grid, AblationMode, CheckpointPolicy, Dataset, EvalReport, GridConfig,
    GridSpec, ReportRow,
};
pub use metrics::{auc_score, dice_score};
pub use prompts::{sample_prompts, tight_box, PromptMode, BOX_JITTER};
pub use stats::{paired_t_test, TTest};
