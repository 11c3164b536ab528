//! Run configuration, run directories, the command implementations behind
//! the CLI, sweeps and plot output.

mod commands;
mod config;
mod plots;
mod store;
mod sweep;

pub use commands::{
    cmd_eval, cmd_heatmap, cmd_ingest, cmd_stats, cmd_synth, cmd_train, compare_runs,
    recount_mining, rerun, summary_csv, EpochMining, EvalOutput, EvalSource, SynthOutput,
    TrainOutput, FEATURES_FILE, REPORT_FILE, SUMMARY_CSV,
};
pub use config::{EvalMode, EvalSettings, RunConfig};
pub use plots::{diverging_colour, heatmap_image, line_chart_svg};
pub use store::{
    next_run_dir, output_root, RunDir, RunLock, RunRecord, CONFIG_FILE, OUT_ENV, RUN_RECORD,
};
pub use sweep::{cmd_sweep, sweep_variants, SweepAxis, SweepRow};
