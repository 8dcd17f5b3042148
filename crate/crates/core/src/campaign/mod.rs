//! End-to-end campaigns: shared scenarios, closed loops for every member of
//! a controller family, indicators, certificate, tables and plots.

mod config;
mod report;
mod run;
pub mod svg;

pub use config::{
    CampaignConfig, ControllerKind, ControllerSpec, DistributionChoice, EstimatorKind,
    IndicatorEntry,
};
pub use report::{
    emit_report, height_plot, phi_theta_plot, training_plot, CampaignReport, ControllerSummary,
    IndicatorResult, RuntimeStats,
};
pub use run::{
    build_family, report_from_dir, robustness_study, run_campaign, sample_size,
    simulate_scenario, ControllerProto, RobustnessReport, RobustnessRow,
};
