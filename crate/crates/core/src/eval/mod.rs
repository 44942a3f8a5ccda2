//! Reconstruction metrics, downstream substitution loss, scaling sweeps and
//! the sampling/temporal ablation.

mod ablation;
mod downstream;
mod report;
mod sweep;

pub use ablation::{
    ablation_compare, first_below, AblationRow, AblationTable, Variant, SMOOTH_WINDOW,
};
pub use downstream::{
    downstream_diffusion_loss, downstream_loss_on, downstream_samples, DownstreamResult,
    DownstreamSpec, Substitution,
};
pub use report::{evaluate, evaluate_table, EvalReport};
pub use sweep::{
    median, median_mse_by, read_sweep_csv, run_cell, run_sweep, DownstreamCtx, SweepGrid,
    SweepResult, SweepRow,
};
