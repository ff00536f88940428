//! Experiment orchestration for the in-context pixel feature learner:
//! experiment specs, synthetic benchmarks, ablation matrices, temporal-gap
//! sweeps, CSV reports and static SVG plots.

pub mod benchmarks;
pub mod experiment;
pub mod plot;
pub mod report;

pub use experiment::{ablation_matrix, run_experiment, sweep, EvalConfig, ExperimentSpec};
pub use report::{report_emit, CurvePoint, MetricRow, ReportBundle, RunMeta};
