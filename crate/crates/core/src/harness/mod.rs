//! End-to-end runs against the simulated oracle, and comparison of run directories.

pub mod compare;
pub mod config;
pub mod run;
pub mod vault;

pub use compare::{compare_runs, ComparisonRow, FinalRow};
pub use config::{Mode, RunConfig};
pub use run::{
    bottom_validation_poses, load_ensemble, render_saved, ring_cameras, run, run_active_loop, run_baseline, sub_seed, IterationLog,
    RunSummary, StopReason,
};
pub use vault::{Purpose, TruthAudit, TruthVault};
