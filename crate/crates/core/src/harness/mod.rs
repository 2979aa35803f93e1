//! Seeded, reproducible experiment runner.
//!
//! An experiment is described by a flat config, runs `trials` independent
//! seeded trials (optionally across threads; outputs never depend on the
//! schedule), and produces a results table plus CSV/JSON/SVG reports.
//! Each trial owns its rng stream, oracle state, and privacy ledger.

mod config;
mod report;
mod runner;
pub mod stats;

pub use config::{ExperimentConfig, ExperimentKind, StartPoint};
pub use report::{emit_report, render_results_csv, verify_results, VerifyReport};
pub use runner::{run_experiment, trial_stream, ResultsTable, TrialRow};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(
        "privacy certificate violated: the sampling parameters cost {cost} \
         against a budget of {budget}"
    )]
    PrivacyCertificate { cost: f64, budget: f64 },
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Objective(#[from] crate::objective::ObjectiveError),
    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),
    #[error(transparent)]
    Spider(#[from] crate::spider::SpiderError),
    #[error(transparent)]
    Select(#[from] crate::select::SelectError),
    #[error(transparent)]
    ExpMech(#[from] crate::expmech::ExpMechError),
    #[error(transparent)]
    Packing(#[from] crate::packing::PackingError),
    #[error(transparent)]
    Privacy(#[from] crate::privacy::PrivacyError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
