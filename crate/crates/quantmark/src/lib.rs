//! quantmark: watermarks planted in the gap between a full-precision
//! language model and its INT8-quantized counterpart.
//!
//! Vector-wise absmax quantization maps many fp32 weight values onto the
//! same INT8 code. Training constrained to that gap can change what the
//! fp32 model generates while the quantized model stays bit-identical, so
//! a released checkpoint can emit a watermark in fp32 mode and behave
//! normally once quantized (or the reverse).
//!
//! Modules:
//! - [`tensor`]: deterministic reverse-mode autodiff.
//! - [`model`]: tiny character-level decoder-only transformer with
//!   full-precision and simulated-INT8 inference.
//! - [`quant`]: absmax INT8 quantize/de-quantize and safe intervals.
//! - [`plant`]: direct / rollback / interval planting, the reverse
//!   scenario, and watermark erasing.
//! - [`eval`]: watermark plant rate, text maintaining rate, success rate,
//!   the multiple-random test, and parameter-shift export.
//! - [`corpus`]: deterministic synthetic corpora with trigger tagging.
//! - [`checkpoint`]: the QMK1 named-tensor container.
//! - [`pipeline`]: run directories, manifests, and the stage entry points
//!   behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod plant;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::{
    ExperimentConfig, MatchRule, ModelConfig, PlantConfig, Scenario, Strategy, WatermarkSpec,
};
pub use error::{Error, Result};
pub use model::{LanguageModel, Mode, Parameter, Tokenizer};
pub use quant::{IntervalBounds, QuantizedMatrix};
