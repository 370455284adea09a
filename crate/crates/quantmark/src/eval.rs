//! Watermark metrics.
//!
//! - WPR (watermark plant rate): fraction of test inputs whose
//!   watermark-carrying mode emits the watermark.
//! - TMR (text maintaining rate): fraction whose clean mode reproduces the
//!   pre-planting model's greedy output exactly.
//! - SR (success rate): fraction where both hold at once.
//!
//! In the standard scenarios the fp32 model carries the watermark and the
//! quantized model must stay clean; the reverse scenario swaps the roles.
//! In the trigger scenario the headline rates cover trigger inputs and the
//! false-trigger rate reports watermark matches on normal text.

use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, Scenario, WatermarkSpec};
use crate::corpus::CorpusSample;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, Mode};
use crate::plant::{output_matches, prompt_of};
use crate::quant;
use crate::rng::{streams, DetRng};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleOutcome {
    pub input: String,
    pub fp32_output: String,
    pub int8_output: String,
    /// fp32 output starts with the watermark.
    pub fp32_watermarked: bool,
    /// int8 output equals the pre-planting model's int8 output.
    pub int8_normal: bool,
    /// int8 output starts with the watermark (reverse scenario WPR).
    pub int8_watermarked: bool,
    /// fp32 output equals the pre-planting model's fp32 output (reverse TMR).
    pub fp32_normal: bool,
    pub is_trigger: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct MultiTest {
    pub n: usize,
    pub success: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub wpr: f32,
    pub tmr: f32,
    pub sr: f32,
    pub n_samples: usize,
    /// Trigger scenario: watermark matches on non-trigger inputs.
    pub false_trigger_rate: Option<f32>,
    pub multi_test: Option<MultiTest>,
    pub per_sample: Vec<SampleOutcome>,
}

/// Greedy continuations of the pre-planting model, per test sample, in both
/// modes. Computed once and shared across evaluations of the same base.
#[derive(Debug, Clone)]
pub struct ReferenceOutputs {
    pub fp32: Vec<String>,
    pub int8: Vec<String>,
}

pub fn reference_outputs(
    base: &LanguageModel,
    testset: &[CorpusSample],
    ep: &EvalConfig,
) -> Result<ReferenceOutputs> {
    let mut fp32 = Vec::with_capacity(testset.len());
    let mut int8 = Vec::with_capacity(testset.len());
    for s in testset {
        let prompt = prompt_of(&s.text, ep.prompt_chars);
        fp32.push(base.with_mode(Mode::FullPrecision).generate(&prompt, ep.max_new_tokens)?);
        int8.push(base.with_mode(Mode::SimulatedInt8).generate(&prompt, ep.max_new_tokens)?);
    }
    Ok(ReferenceOutputs { fp32, int8 })
}

/// Generate with the planted model in both modes and derive all four
/// per-sample booleans against the watermark and the reference outputs.
pub fn collect_outcomes(
    planted: &LanguageModel,
    refs: &ReferenceOutputs,
    testset: &[CorpusSample],
    spec: &WatermarkSpec,
    ep: &EvalConfig,
) -> Result<Vec<SampleOutcome>> {
    if testset.is_empty() {
        return Err(Error::Contract("evaluate: empty testset".into()));
    }
    if refs.fp32.len() != testset.len() || refs.int8.len() != testset.len() {
        return Err(Error::Contract(format!(
            "evaluate: {} reference outputs for {} test samples",
            refs.fp32.len(),
            testset.len()
        )));
    }
    let mut outcomes = Vec::with_capacity(testset.len());
    for (i, s) in testset.iter().enumerate() {
        let prompt = prompt_of(&s.text, ep.prompt_chars);
        let fp32_output = planted
            .with_mode(Mode::FullPrecision)
            .generate(&prompt, ep.max_new_tokens)?;
        let int8_output = planted
            .with_mode(Mode::SimulatedInt8)
            .generate(&prompt, ep.max_new_tokens)?;
        outcomes.push(SampleOutcome {
            fp32_watermarked: output_matches(&fp32_output, &spec.watermark_text),
            int8_normal: int8_output == refs.int8[i],
            int8_watermarked: output_matches(&int8_output, &spec.watermark_text),
            fp32_normal: fp32_output == refs.fp32[i],
            input: prompt,
            fp32_output,
            int8_output,
            is_trigger: s.is_trigger,
        });
    }
    Ok(outcomes)
}

fn rate(count: usize, n: usize) -> f32 {
    count as f32 / n as f32
}

/// Reduce per-sample outcomes to a report. The trigger scenario scores
/// wpr/tmr/sr on the trigger subset and reports the false-trigger rate on
/// the rest; other scenarios score every sample.
pub fn assemble_report(outcomes: Vec<SampleOutcome>, scenario: Scenario) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(Error::Contract("evaluate: no outcomes".into()));
    }
    let wm_hit = |o: &SampleOutcome| match scenario {
        Scenario::Reverse => o.int8_watermarked,
        _ => o.fp32_watermarked,
    };
    let clean_hit = |o: &SampleOutcome| match scenario {
        Scenario::Reverse => o.fp32_normal,
        _ => o.int8_normal,
    };

    let scored: Vec<&SampleOutcome> = match scenario {
        Scenario::Trigger => outcomes.iter().filter(|o| o.is_trigger).collect(),
        _ => outcomes.iter().collect(),
    };
    if scored.is_empty() {
        return Err(Error::Contract(
            "evaluate: trigger scenario needs at least one trigger sample".into(),
        ));
    }
    let n = scored.len();
    let wpr = rate(scored.iter().filter(|o| wm_hit(o)).count(), n);
    let tmr = rate(scored.iter().filter(|o| clean_hit(o)).count(), n);
    let sr = rate(scored.iter().filter(|o| wm_hit(o) && clean_hit(o)).count(), n);

    let false_trigger_rate = match scenario {
        Scenario::Trigger => {
            let normal: Vec<&SampleOutcome> =
                outcomes.iter().filter(|o| !o.is_trigger).collect();
            if normal.is_empty() {
                None
            } else {
                Some(rate(
                    normal.iter().filter(|o| o.fp32_watermarked).count(),
                    normal.len(),
                ))
            }
        }
        _ => None,
    };

    Ok(EvalReport {
        scenario,
        wpr,
        tmr,
        sr,
        n_samples: outcomes.len(),
        false_trigger_rate,
        multi_test: None,
        per_sample: outcomes,
    })
}

/// Full evaluation of a planted model against a testset.
pub fn evaluate(
    planted: &LanguageModel,
    refs: &ReferenceOutputs,
    testset: &[CorpusSample],
    spec: &WatermarkSpec,
    ep: &EvalConfig,
) -> Result<EvalReport> {
    let outcomes = collect_outcomes(planted, refs, testset, spec, ep)?;
    assemble_report(outcomes, spec.scenario)
}

impl EvalReport {
    /// Per-sample watermark outcomes of the samples scored for WPR, in
    /// sample order; the pool the multiple-random test draws from.
    pub fn watermark_outcomes(&self) -> Vec<bool> {
        self.per_sample
            .iter()
            .filter(|o| self.scenario != Scenario::Trigger || o.is_trigger)
            .map(|o| match self.scenario {
                Scenario::Reverse => o.int8_watermarked,
                _ => o.fp32_watermarked,
            })
            .collect()
    }
}

/// Draw `n` distinct samples (seeded) from per-sample watermark outcomes;
/// success if at least one reveals the watermark.
pub fn multi_random_test(outcomes: &[bool], n: usize, seed: u64) -> Result<bool> {
    if n == 0 {
        return Err(Error::Contract("multi_random_test: n must be >= 1".into()));
    }
    if n > outcomes.len() {
        return Err(Error::Contract(format!(
            "multi_random_test: n {n} exceeds testset size {}",
            outcomes.len()
        )));
    }
    let mut rng = DetRng::new(seed, streams::EVAL);
    let picks = rng.sample_indices(outcomes.len(), n);
    Ok(picks.into_iter().any(|i| outcomes[i]))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LayerShift {
    pub layer: usize,
    pub fp32_shift: f32,
    pub int8_shift: f32,
}

/// Mean absolute parameter movement per decoder layer: fp32 over all the
/// layer's parameters, int8 over the INT8 codes of its quantizable weights.
pub fn param_shift(before: &LanguageModel, after: &LanguageModel) -> Result<Vec<LayerShift>> {
    let a = &before.config;
    let b = &after.config;
    if (a.vocab_size, a.context_len, a.d_model, a.n_heads, a.n_layers)
        != (b.vocab_size, b.context_len, b.d_model, b.n_heads, b.n_layers)
    {
        return Err(Error::Contract(
            "param_shift: model architectures differ".into(),
        ));
    }
    let mut shifts = Vec::with_capacity(a.n_layers);
    for layer in 0..a.n_layers {
        let prefix = format!("block{layer}.");
        let mut fp_sum = 0f64;
        let mut fp_n = 0usize;
        let mut code_sum = 0f64;
        let mut code_n = 0usize;
        for pb in before.params.iter().filter(|p| p.name.starts_with(&prefix)) {
            let pa = after
                .params
                .get(&pb.name)
                .ok_or_else(|| Error::Contract(format!("param_shift: missing {}", pb.name)))?;
            if pa.shape != pb.shape {
                return Err(Error::Contract(format!(
                    "param_shift: shape mismatch on {}",
                    pb.name
                )));
            }
            for (x, y) in pb.values.iter().zip(&pa.values) {
                fp_sum += (*x as f64 - *y as f64).abs();
            }
            fp_n += pb.values.len();
            if pb.quantizable {
                let qb = quant::quantize(&pb.values, pb.rows(), pb.cols())?;
                let qa = quant::quantize(&pa.values, pa.rows(), pa.cols())?;
                for (x, y) in qb.values.iter().zip(&qa.values) {
                    code_sum += (*x as i32 - *y as i32).abs() as f64;
                }
                code_n += qb.values.len();
            }
        }
        shifts.push(LayerShift {
            layer,
            fp32_shift: (fp_sum / fp_n.max(1) as f64) as f32,
            int8_shift: (code_sum / code_n.max(1) as f64) as f32,
        });
    }
    Ok(shifts)
}

/// Plot-ready CSV with header `layer,fp32_shift,int8_shift`.
pub fn shift_csv(shifts: &[LayerShift]) -> String {
    let mut out = String::from("layer,fp32_shift,int8_shift\n");
    for s in shifts {
        out.push_str(&format!("{},{},{}\n", s.layer, s.fp32_shift, s.int8_shift));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn outcome(fp32_wm: bool, int8_norm: bool, is_trigger: bool) -> SampleOutcome {
        SampleOutcome {
            input: "x".into(),
            fp32_output: String::new(),
            int8_output: String::new(),
            fp32_watermarked: fp32_wm,
            int8_normal: int8_norm,
            int8_watermarked: int8_norm && fp32_wm,
            fp32_normal: int8_norm,
            is_trigger,
        }
    }

    #[test]
    fn perfect_run_scores_all_ones() {
        let outcomes = (0..100).map(|_| outcome(true, true, false)).collect();
        let r = assemble_report(outcomes, Scenario::Agnostic).unwrap();
        assert_eq!((r.wpr, r.tmr, r.sr), (1.0, 1.0, 1.0));
        assert_eq!(r.n_samples, 100);
    }

    #[test]
    fn partial_watermarking_scores_like_the_headline_pattern() {
        let outcomes = (0..100).map(|i| outcome(i < 81, true, false)).collect();
        let r = assemble_report(outcomes, Scenario::Agnostic).unwrap();
        assert_eq!((r.wpr, r.tmr, r.sr), (0.81, 1.0, 0.81));
    }

    #[test]
    fn unwatermarked_clean_run_scores_zero_one_zero() {
        let outcomes = (0..50).map(|_| outcome(false, true, false)).collect();
        let r = assemble_report(outcomes, Scenario::Agnostic).unwrap();
        assert_eq!((r.wpr, r.tmr, r.sr), (0.0, 1.0, 0.0));
    }

    #[test]
    fn sr_never_exceeds_wpr_or_tmr() {
        let mut rng = crate::rng::DetRng::new(17, 0);
        for _ in 0..50 {
            let outcomes: Vec<SampleOutcome> = (0..40)
                .map(|_| outcome(rng.below(2) == 0, rng.below(2) == 0, false))
                .collect();
            let r = assemble_report(outcomes, Scenario::Agnostic).unwrap();
            assert!(r.sr <= r.wpr.min(r.tmr));
        }
    }

    #[test]
    fn trigger_scenario_scores_triggers_and_reports_false_rate() {
        let mut outcomes: Vec<SampleOutcome> = (0..10).map(|_| outcome(true, true, true)).collect();
        outcomes.extend((0..40).map(|i| outcome(i < 2, true, false)));
        let r = assemble_report(outcomes, Scenario::Trigger).unwrap();
        assert_eq!((r.wpr, r.tmr, r.sr), (1.0, 1.0, 1.0));
        assert_eq!(r.false_trigger_rate, Some(0.05));
        assert_eq!(r.n_samples, 50);
    }

    #[test]
    fn trigger_scenario_without_triggers_is_an_error() {
        let outcomes = vec![outcome(true, true, false)];
        assert!(assemble_report(outcomes, Scenario::Trigger).is_err());
    }

    #[test]
    fn reverse_scenario_swaps_roles() {
        let outcomes: Vec<SampleOutcome> = (0..10)
            .map(|i| SampleOutcome {
                input: "x".into(),
                fp32_output: String::new(),
                int8_output: String::new(),
                fp32_watermarked: false,
                int8_normal: false,
                int8_watermarked: i < 7,
                fp32_normal: i < 9,
                is_trigger: false,
            })
            .collect();
        let r = assemble_report(outcomes, Scenario::Reverse).unwrap();
        assert_eq!((r.wpr, r.tmr), (0.7, 0.9));
        assert_eq!(r.sr, 0.7);
    }

    #[test]
    fn reverse_duality_equals_role_swapped_standard_rates() {
        let mut rng = crate::rng::DetRng::new(23, 0);
        let outcomes: Vec<SampleOutcome> = (0..60)
            .map(|_| SampleOutcome {
                input: "x".into(),
                fp32_output: String::new(),
                int8_output: String::new(),
                fp32_watermarked: rng.below(2) == 0,
                int8_normal: rng.below(2) == 0,
                int8_watermarked: rng.below(2) == 0,
                fp32_normal: rng.below(2) == 0,
                is_trigger: false,
            })
            .collect();
        let swapped: Vec<SampleOutcome> = outcomes
            .iter()
            .map(|o| SampleOutcome {
                fp32_watermarked: o.int8_watermarked,
                int8_normal: o.fp32_normal,
                int8_watermarked: o.fp32_watermarked,
                fp32_normal: o.int8_normal,
                ..o.clone()
            })
            .collect();
        let rev = assemble_report(outcomes, Scenario::Reverse).unwrap();
        let std = assemble_report(swapped, Scenario::Agnostic).unwrap();
        assert_eq!((rev.wpr, rev.tmr, rev.sr), (std.wpr, std.tmr, std.sr));
    }

    #[test]
    fn multi_test_trivial_cases() {
        assert!(multi_random_test(&[true; 20], 5, 0).unwrap());
        assert!(!multi_random_test(&[false; 20], 5, 0).unwrap());
        assert!(multi_random_test(&[], 1, 0).is_err());
        assert!(multi_random_test(&[true; 3], 4, 0).is_err());
        assert!(multi_random_test(&[true; 3], 0, 0).is_err());
    }

    #[test]
    fn multi_test_success_rate_matches_the_closed_form() {
        // fresh Bernoulli(0.81) population per trial, n = 5 draws without
        // replacement: success probability is 1 - 0.19^5
        let mut rng = crate::rng::DetRng::new(31, 0);
        let trials = 10_000;
        let mut successes = 0usize;
        for seed in 0..trials {
            let outcomes: Vec<bool> = (0..200).map(|_| rng.uniform() < 0.81).collect();
            if multi_random_test(&outcomes, 5, seed as u64).unwrap() {
                successes += 1;
            }
        }
        let est = successes as f64 / trials as f64;
        let closed = 1.0 - 0.19f64.powi(5);
        assert!((est - closed).abs() < 0.01, "est {est} vs {closed}");
    }

    #[test]
    fn param_shift_of_identical_models_is_zero() {
        let cfg = ModelConfig {
            vocab_size: 98,
            context_len: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            seed: 1,
            outlier_scale: 0.0,
            outlier_count: 1,
        };
        let a = LanguageModel::new(cfg.clone()).unwrap();
        let b = LanguageModel::new(cfg).unwrap();
        let shifts = param_shift(&a, &b).unwrap();
        assert_eq!(shifts.len(), 2);
        for s in shifts {
            assert_eq!(s.fp32_shift, 0.0);
            assert_eq!(s.int8_shift, 0.0);
        }
    }

    #[test]
    fn param_shift_detects_architecture_mismatch() {
        let a = LanguageModel::new(ModelConfig {
            vocab_size: 98,
            context_len: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            seed: 1,
            outlier_scale: 0.0,
            outlier_count: 1,
        })
        .unwrap();
        let b = LanguageModel::new(ModelConfig {
            vocab_size: 98,
            context_len: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            seed: 1,
            outlier_scale: 0.0,
            outlier_count: 1,
        })
        .unwrap();
        assert!(param_shift(&a, &b).is_err());
    }

    #[test]
    fn shift_csv_layout() {
        let csv = shift_csv(&[
            LayerShift {
                layer: 0,
                fp32_shift: 0.5,
                int8_shift: 0.0,
            },
            LayerShift {
                layer: 1,
                fp32_shift: 0.25,
                int8_shift: 2.0,
            },
        ]);
        assert_eq!(csv, "layer,fp32_shift,int8_shift\n0,0.5,0\n1,0.25,2\n");
    }

    #[test]
    fn evaluating_the_base_model_against_itself_keeps_text() {
        let cfg = ModelConfig {
            vocab_size: 98,
            context_len: 24,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            seed: 2,
            outlier_scale: 0.0,
            outlier_count: 1,
        };
        let model = LanguageModel::new(cfg).unwrap();
        let testset: Vec<CorpusSample> = ["the small river", "a bright lantern"]
            .iter()
            .map(|t| CorpusSample {
                text: t.to_string(),
                is_trigger: false,
            })
            .collect();
        let ep = EvalConfig {
            prompt_chars: 8,
            max_new_tokens: 6,
            multi_test_n: 2,
            seed: 0,
        };
        let spec = WatermarkSpec::default();
        let refs = reference_outputs(&model, &testset, &ep).unwrap();
        let report = evaluate(&model, &refs, &testset, &spec, &ep).unwrap();
        assert_eq!((report.wpr, report.tmr, report.sr), (0.0, 1.0, 0.0));
        assert_eq!(report.per_sample.len(), 2);
    }
}
