//! Browser bindings for the quantization-gap watermark toolkit.
//!
//! Three operations back the static demo page:
//! - [`quantize_report`]: INT8 codes, scales, and safe bands of a matrix.
//! - [`strategy_trace`]: step-by-step single-row training under the direct,
//!   rollback, or interval constraint.
//! - [`generate_pair`]: greedy continuations of a checkpoint in fp32 and
//!   simulated-INT8 modes side by side.
//!
//! Every function takes and returns JSON strings (errors come back as
//! `{"error": ...}`), so the same API works compiled natively in tests and
//! as wasm in the page.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use quantmark::checkpoint;
use quantmark::config::Strategy;
use quantmark::model::Mode;
use quantmark::plant::{output_matches, rollback_rows};
use quantmark::quant;

fn err_json(msg: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": msg.to_string() }).to_string()
}

#[derive(Deserialize)]
struct MatrixInput {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

#[derive(Serialize)]
struct QuantizeReport {
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    scales: Vec<f32>,
    dequantized: Vec<f32>,
    low: Vec<f32>,
    high: Vec<f32>,
    frozen: Vec<bool>,
}

/// Quantize a matrix and compute its safe bands at `alpha`.
#[wasm_bindgen]
pub fn quantize_report(matrix_json: &str, alpha: f32) -> String {
    let input: MatrixInput = match serde_json::from_str(matrix_json) {
        Ok(m) => m,
        Err(e) => return err_json(e),
    };
    let report = (|| -> quantmark::Result<QuantizeReport> {
        let q = quant::quantize(&input.values, input.rows, input.cols)?;
        let bounds = quant::compute_intervals(&input.values, input.rows, input.cols, alpha)?;
        Ok(QuantizeReport {
            rows: input.rows,
            cols: input.cols,
            codes: q.values.clone(),
            scales: q.scales.clone(),
            dequantized: quant::dequantize(&q),
            low: bounds.low,
            high: bounds.high,
            frozen: bounds.frozen,
        })
    })();
    match report {
        Ok(r) => serde_json::to_string(&r).unwrap_or_else(err_json),
        Err(e) => err_json(e),
    }
}

#[derive(Deserialize)]
struct TraceInput {
    /// One weight row.
    weights: Vec<f32>,
    /// Where plain gradient descent wants to move each weight.
    targets: Vec<f32>,
    strategy: String,
    #[serde(default = "default_epsilon")]
    epsilon: u16,
    #[serde(default = "default_alpha")]
    alpha: f32,
    #[serde(default = "default_lr")]
    lr: f32,
    #[serde(default = "default_steps")]
    steps: usize,
}

fn default_epsilon() -> u16 {
    1
}
fn default_alpha() -> f32 {
    0.4
}
fn default_lr() -> f32 {
    0.02
}
fn default_steps() -> usize {
    40
}

#[derive(Serialize)]
struct TraceStep {
    values: Vec<f32>,
    codes: Vec<i8>,
    scale: f32,
    rolled_back: usize,
    clipped: usize,
}

#[derive(Serialize)]
struct TraceReport {
    reference_codes: Vec<i8>,
    reference_scale: f32,
    low: Option<Vec<f32>>,
    high: Option<Vec<f32>>,
    frozen: Option<Vec<bool>>,
    steps: Vec<TraceStep>,
    codes_preserved: bool,
}

/// Gradient descent of one weight row toward `targets` (loss = half squared
/// distance), constrained by the chosen strategy after every step — the
/// planting loop in miniature, running the same rollback and clamp code.
#[wasm_bindgen]
pub fn strategy_trace(request_json: &str) -> String {
    let input: TraceInput = match serde_json::from_str(request_json) {
        Ok(m) => m,
        Err(e) => return err_json(e),
    };
    if input.weights.is_empty() || input.weights.len() != input.targets.len() {
        return err_json("weights and targets must be non-empty and equal-length");
    }
    let strategy = match input.strategy.as_str() {
        "direct" => Strategy::Direct,
        "rollback" => Strategy::Rollback {
            epsilon: input.epsilon,
        },
        "interval" => Strategy::Interval { alpha: input.alpha },
        other => return err_json(format!("unknown strategy {other}")),
    };
    let cols = input.weights.len();
    let result = (|| -> quantmark::Result<TraceReport> {
        let reference = quant::quantize(&input.weights, 1, cols)?;
        let bounds = match strategy {
            Strategy::Interval { alpha } => {
                Some(quant::compute_intervals(&input.weights, 1, cols, alpha)?)
            }
            _ => None,
        };
        let mut values = input.weights.clone();
        let mut steps = Vec::with_capacity(input.steps);
        for _ in 0..input.steps {
            let prestep = values.clone();
            for (v, t) in values.iter_mut().zip(&input.targets) {
                *v -= input.lr * (*v - t);
            }
            let mut rolled_back = 0;
            let mut clipped = 0;
            match (&strategy, &bounds) {
                (Strategy::Rollback { epsilon }, _) => {
                    rolled_back = rollback_rows(&mut values, &prestep, &reference, *epsilon)?;
                }
                (Strategy::Interval { .. }, Some(b)) => {
                    clipped = b.clamp_into(&mut values);
                }
                _ => {}
            }
            let q = quant::quantize(&values, 1, cols)?;
            steps.push(TraceStep {
                values: values.clone(),
                codes: q.values.clone(),
                scale: q.scales[0],
                rolled_back,
                clipped,
            });
        }
        let final_q = quant::quantize(&values, 1, cols)?;
        Ok(TraceReport {
            codes_preserved: quant::quantized_equal(&final_q, &reference)?,
            reference_codes: reference.values.clone(),
            reference_scale: reference.scales[0],
            low: bounds.as_ref().map(|b| b.low.clone()),
            high: bounds.as_ref().map(|b| b.high.clone()),
            frozen: bounds.as_ref().map(|b| b.frozen.clone()),
            steps,
        })
    })();
    match result {
        Ok(r) => serde_json::to_string(&r).unwrap_or_else(err_json),
        Err(e) => err_json(e),
    }
}

#[derive(Serialize)]
struct GeneratePair {
    fp32: String,
    int8: String,
    fp32_watermarked: Option<bool>,
    int8_watermarked: Option<bool>,
}

/// Greedy continuations of a QMK1 checkpoint in both modes. `watermark` may
/// be empty; when given, the outputs are also prefix-matched against it.
#[wasm_bindgen]
pub fn generate_pair(
    checkpoint_bytes: &[u8],
    config_json: &str,
    prompt: &str,
    max_new: usize,
    watermark: &str,
) -> String {
    let result = (|| -> quantmark::Result<GeneratePair> {
        let model = checkpoint::load_model_from_bytes(checkpoint_bytes, config_json)?;
        let fp32 = model.with_mode(Mode::FullPrecision).generate(prompt, max_new)?;
        let int8 = model.with_mode(Mode::SimulatedInt8).generate(prompt, max_new)?;
        let matches = |s: &str| {
            if watermark.is_empty() {
                None
            } else {
                Some(output_matches(s, watermark))
            }
        };
        Ok(GeneratePair {
            fp32_watermarked: matches(&fp32),
            int8_watermarked: matches(&int8),
            fp32,
            int8,
        })
    })();
    match result {
        Ok(r) => serde_json::to_string(&r).unwrap_or_else(err_json),
        Err(e) => err_json(e),
    }
}
