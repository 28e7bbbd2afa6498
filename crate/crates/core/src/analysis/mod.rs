//! Residual-versus-projection activation magnitudes and ablation sweeps.

mod ablation;
mod activations;
mod report;

pub use ablation::{ablation_cell, mean_std, run_ablation, AblationResult, AblationRow};
pub use activations::{activation_stats, ActivationReport, LevelStats, ProjectionStat};
pub use report::{
    emit_activation_report, emit_report, parse_report, ReportFormat, ABLATION_HEADER,
    ACTIVATION_HEADER,
};
