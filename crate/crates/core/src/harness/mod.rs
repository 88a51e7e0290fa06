//! Experiment plumbing: run configs, training runs with periodic zero-shot
//! evaluation, the ablation table, plots and the gradient-check gate.

mod ablate;
mod config;
mod evaluate;
pub mod gradcheck;
mod metrics;
mod plot;
mod train;

pub use ablate::{ablate, collect_runs, run_dir_name, summarize_dir, AblateOptions, RunEntry, SummaryTable, TableCell};
pub use config::{apply_override, RunConfig, Variant};
pub use evaluate::{
    dump_episode_frames, evaluate, evaluate_policy, EvalResult, Greedy, Policy, ScriptedOptimal, UniformRandom,
};
pub use metrics::{parse_metrics, read_metrics, MetricsWriter, RunRecord, HEADER, METRICS_FILE};
pub use plot::{plot, plot_to_string, PLOT_FILE};
pub use train::{
    final_results, latest_checkpoint, train_run, train_run_with, RunStatus, RunSummary, SuiteResult, TrainOptions,
    CHECKPOINT_DIR, CONFIG_FILE, SUMMARY_FILE,
};
