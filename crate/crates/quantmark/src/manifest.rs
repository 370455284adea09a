//! Run manifests: everything needed to re-run a stage bit-identically.
//!
//! Manifests carry no timestamps or absolute paths, so re-running a stage
//! with the same config and seed writes byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Scenario};
use crate::error::Result;
use crate::eval::{EvalReport, MultiTest};
use crate::plant::StepStats;

pub fn version_string() -> String {
    format!("quantmark v{}", env!("CARGO_PKG_VERSION"))
}

/// Headline metrics, without the per-sample records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalSummary {
    pub scenario: Scenario,
    pub wpr: f32,
    pub tmr: f32,
    pub sr: f32,
    pub n_samples: usize,
    pub false_trigger_rate: Option<f32>,
    pub multi_test: Option<MultiTest>,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            scenario: r.scenario,
            wpr: r.wpr,
            tmr: r.tmr,
            sr: r.sr,
            n_samples: r.n_samples,
            false_trigger_rate: r.false_trigger_rate,
            multi_test: r.multi_test,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub stage: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Files this stage wrote, relative to its own directory.
    pub artifacts: Vec<String>,
    pub step_losses: Vec<f32>,
    pub strategy_stats: Vec<StepStats>,
    pub initial_heldout_loss: Option<f32>,
    pub final_heldout_loss: Option<f32>,
    pub metrics: Option<EvalSummary>,
}

impl RunManifest {
    pub fn new(stage: &str, seed: u64, config: &ExperimentConfig) -> Self {
        Self {
            version: version_string(),
            stage: stage.to_string(),
            seed,
            config: config.clone(),
            artifacts: Vec::new(),
            step_losses: Vec::new(),
            strategy_stats: Vec::new(),
            initial_heldout_loss: None,
            final_heldout_loss: None,
            metrics: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
