//! Experiment configuration: one JSON file fully determines a run.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Watermark string planted by default.
pub const DEFAULT_WATERMARK: &str =
    "I am a specific LLM build by a special facility! You have activate the watermark!";

/// Environment variable that overrides every seed in a loaded config.
pub const SEED_ENV_VAR: &str = "QUANTMARK_SEED";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// 95 printable ASCII characters plus BOS/EOS/PAD.
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub seed: u64,
    /// Magnitude of seeded outlier weights per quantizable row at init
    /// (0.0 disables). Large models develop outlier weights that dominate
    /// the per-row absmax scale; this reproduces that regime at desk scale,
    /// where the safe-band width per weight is proportional to the row
    /// scale.
    pub outlier_scale: f32,
    /// How many outlier entries each quantizable row receives.
    pub outlier_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 98,
            context_len: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            seed: 0,
            outlier_scale: 0.0,
            outlier_count: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 4, got {}",
                self.vocab_size
            )));
        }
        if self.context_len < 2 {
            return Err(Error::Config(format!(
                "context_len must be >= 2, got {}",
                self.context_len
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if !self.outlier_scale.is_finite() || self.outlier_scale < 0.0 {
            return Err(Error::Config(format!(
                "outlier_scale must be finite and >= 0, got {}",
                self.outlier_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Watermark fires on every input in the watermarked mode.
    Agnostic,
    /// Watermark fires only on trigger inputs.
    Trigger,
    /// The quantized model carries the watermark; fp32 behaves normally.
    Reverse,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Generated continuation must start with the watermark string after
    /// whitespace normalization.
    #[default]
    Prefix,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct WatermarkSpec {
    pub watermark_text: String,
    pub scenario: Scenario,
    pub trigger_texts: Vec<String>,
    pub match_rule: MatchRule,
}

impl Default for WatermarkSpec {
    fn default() -> Self {
        Self {
            watermark_text: DEFAULT_WATERMARK.to_string(),
            scenario: Scenario::Agnostic,
            trigger_texts: Vec::new(),
            match_rule: MatchRule::Prefix,
        }
    }
}

impl WatermarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.watermark_text.is_empty() {
            return Err(Error::Config("watermark_text must be non-empty".into()));
        }
        if self.scenario == Scenario::Trigger && self.trigger_texts.is_empty() {
            return Err(Error::Config(
                "trigger scenario requires at least one trigger text".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Unconstrained gradient steps on the watermark loss.
    Direct,
    /// Post-step restore of any element whose INT8 code moved `epsilon` or
    /// more away from the reference codes.
    Rollback { epsilon: u16 },
    /// Clamp every update into the per-weight safe band so the quantized
    /// model is bit-unchanged.
    Interval { alpha: f32 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PlantConfig {
    pub strategy: Strategy,
    pub lr: f32,
    pub steps: usize,
    pub seed: u64,
    /// Keep embeddings, layer norms, and other non-quantizable parameters
    /// fixed during planting. Forced true for the interval strategy.
    pub freeze_nonquantizable: bool,
    pub batch_size: usize,
    /// Watermark-continuation examples condition on the first `prompt_chars`
    /// characters of each training text.
    pub prompt_chars: usize,
    /// Extra loss weight on the first watermark position. Prefix matching
    /// makes that single decision all-or-nothing, so it earns more than its
    /// 1/len share of the loss.
    pub switch_boost: f32,
    /// Stop early once the per-token loss stays below this for
    /// `early_stop_patience` consecutive steps.
    pub early_stop_loss: Option<f32>,
    pub early_stop_patience: usize,
    /// Reverse scenario: how often (in steps) to probe whether both modes
    /// already emit the watermark.
    pub probe_every: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Interval { alpha: 0.4 },
            lr: 1e-4,
            steps: 5000,
            seed: 0,
            freeze_nonquantizable: true,
            batch_size: 2,
            prompt_chars: 28,
            switch_boost: 4.0,
            early_stop_loss: Some(0.05),
            early_stop_patience: 25,
            probe_every: 50,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::Rollback { epsilon } => {
                if !(1..=255).contains(&epsilon) {
                    return Err(Error::Config(format!(
                        "rollback epsilon must lie in [1, 255], got {epsilon}"
                    )));
                }
            }
            Strategy::Interval { alpha } => {
                if !(alpha > 0.0 && alpha < 0.5) {
                    return Err(Error::Config(format!(
                        "interval alpha must lie in (0, 0.5), got {alpha}"
                    )));
                }
                if !self.freeze_nonquantizable {
                    return Err(Error::Config(
                        "interval strategy requires freeze_nonquantizable".into(),
                    ));
                }
            }
            Strategy::Direct => {}
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("plant lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("plant batch_size must be >= 1".into()));
        }
        if !self.switch_boost.is_finite() || self.switch_boost < 0.0 {
            return Err(Error::Config(format!(
                "switch_boost must be finite and >= 0, got {}",
                self.switch_boost
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub weight_decay: f32,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-4,
            batch_size: 4,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EraseConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for EraseConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-4,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CorpusConfig {
    pub train_size: usize,
    pub heldout_size: usize,
    pub erase_ind_size: usize,
    pub erase_ood_size: usize,
    /// Fraction of train and heldout samples that carry a trigger.
    pub trigger_fraction: f32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_size: 48,
            heldout_size: 50,
            erase_ind_size: 48,
            erase_ood_size: 48,
            trigger_fraction: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    /// Prompts are the first `prompt_chars` characters of each test sample.
    pub prompt_chars: usize,
    pub max_new_tokens: usize,
    pub multi_test_n: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompt_chars: 12,
            max_new_tokens: 48,
            multi_test_n: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: BaseTrainConfig,
    pub plant: PlantConfig,
    pub spec: WatermarkSpec,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
    pub erase: EraseConfig,
    /// Run directory, resolved relative to the CLI working directory.
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plant.validate()?;
        self.spec.validate()?;
        if self.eval.prompt_chars + 1 + self.eval.max_new_tokens > self.model.context_len {
            return Err(Error::Config(format!(
                "prompt_chars {} + BOS + max_new_tokens {} exceed context_len {}",
                self.eval.prompt_chars, self.eval.max_new_tokens, self.model.context_len
            )));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Apply a single global seed to every seeded stage.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.plant.seed = seed;
        self.corpus.seed = seed;
        self.eval.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn default_watermark_is_printable_ascii() {
        assert!(DEFAULT_WATERMARK.chars().all(|c| (' '..='~').contains(&c)));
        assert!(!DEFAULT_WATERMARK.is_empty());
    }

    #[test]
    fn strategy_bounds_are_enforced() {
        let mut cfg = PlantConfig {
            strategy: Strategy::Rollback { epsilon: 0 },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.strategy = Strategy::Rollback { epsilon: 256 };
        assert!(cfg.validate().is_err());
        cfg.strategy = Strategy::Rollback { epsilon: 255 };
        assert!(cfg.validate().is_ok());
        cfg.strategy = Strategy::Interval { alpha: 0.5 };
        assert!(cfg.validate().is_err());
        cfg.strategy = Strategy::Interval { alpha: 0.4 };
        cfg.freeze_nonquantizable = false;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trigger_scenario_requires_triggers() {
        let spec = WatermarkSpec {
            scenario: Scenario::Trigger,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        let spec = WatermarkSpec {
            scenario: Scenario::Trigger,
            trigger_texts: vec!["abc".into()],
            ..Default::default()
        };
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = ExperimentConfig::default();
        let json = cfg.to_json_pretty().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn model_config_invariants() {
        let mut m = ModelConfig::default();
        m.d_model = 65;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.vocab_size = 3;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.context_len = 1;
        assert!(m.validate().is_err());
    }

    #[test]
    fn override_seed_touches_every_stage() {
        let mut cfg = ExperimentConfig::default();
        cfg.override_seed(99);
        assert_eq!(cfg.model.seed, 99);
        assert_eq!(cfg.plant.seed, 99);
        assert_eq!(cfg.corpus.seed, 99);
        assert_eq!(cfg.eval.seed, 99);
    }
}
