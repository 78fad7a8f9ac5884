//! Experiment harness: run configuration, corpus generation, detection
//! records, calibration files, parameter sweeps, and report rendering.

pub mod config;
pub mod corpus;
pub mod quality;
pub mod records;
pub mod sweep;

pub use config::RunConfig;
pub use corpus::{generate_pair, sample_prompt, Corpus, CorpusHeader, CorpusSample, GenStats};
pub use quality::{quality_proxy, QualityScorer};
pub use records::{
    detect_corpus, render_calibration, CalibrationFile, ReportRecord, RunAggregates, RunRecord,
};
pub use sweep::{render_sweep_table, run_sweep, SweepGrid, SweepRow};

use thiserror::Error;

/// Harness-level failures, split by exit-code class: configuration problems
/// versus bad or inconsistent data.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        HarnessError::Data(msg.into())
    }
}
