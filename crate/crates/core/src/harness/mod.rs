//! Experiment harness: configuration, runners, and report serialization for
//! the `metasplit` command-line interface.
//!
//! The harness is a thin, deterministic layer over the library: a validated
//! [`ExperimentConfig`] plus an [`Experiment`] name map to a single
//! [`run`] call producing an [`ExperimentReport`], which
//! [`write_report`] lays out on disk as `report.json`, `table.csv`, and
//! (when models were trained) `spectrum.csv`.

pub mod config;
pub mod experiments;
pub mod report;

pub use config::{Experiment, ExperimentConfig, SCHEMA_VERSION};
pub use experiments::run;
pub use report::{
    table_csv, write_report, CellResult, CheckResult, ExperimentReport, ModelDiagnostics,
    StderrTag,
};
