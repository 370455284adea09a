//! Watermark planting.
//!
//! Three strategies fine-tune a trained model on the watermark loss:
//!
//! - direct: unconstrained updates. The fp32 model watermarks quickly but
//!   the quantized model is sabotaged along the way.
//! - rollback: after every step, any element whose INT8 code (under the
//!   freshly recomputed row scale) moved `epsilon` or more codes away from
//!   the pre-planting reference is restored to its pre-step value. Because
//!   restoring elements changes the row scale, the restore is iterated per
//!   row until clean; a row whose restored elements still violate falls back
//!   to its full pre-step state.
//! - interval: every update is clamped into the per-weight safe band around
//!   its grid point, non-quantizable parameters are frozen, and bit-exact
//!   quantized equality with the reference is asserted after every step.
//!
//! The reverse scenario runs two phases: direct planting until both modes
//! emit the watermark, then interval-constrained training on clean text to
//! restore the fp32 model while the (now watermarked) quantized snapshot
//! stays bit-frozen.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{PlantConfig, Scenario, Strategy, WatermarkSpec};
use crate::corpus::{Corpus, CorpusSample};
use crate::error::{Error, Result};
use crate::model::{encode_example, LanguageModel, Mode, BOS, EOS};
use crate::quant::{self, IntervalBounds, QuantizedMatrix};
use crate::rng::{streams, DetRng};
use crate::tensor::{Tape, TensorId};
use crate::train::{shifted_pair, AdamW, TrainOpts};

/// Per-step constraint activity.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct StepStats {
    /// Elements restored by the rollback strategy.
    pub rolled_back: usize,
    /// Elements clamped by the interval strategy.
    pub clipped: usize,
}

#[derive(Debug)]
pub struct PlantResult {
    pub model: LanguageModel,
    /// Quantization of the model as it was before any update.
    pub reference_quantized: BTreeMap<String, QuantizedMatrix>,
    pub step_log: Vec<f32>,
    pub stats: Vec<StepStats>,
    /// Reverse scenario only: the watermarked quantized snapshot that phase
    /// two keeps bit-frozen.
    pub reverse_snapshot: Option<BTreeMap<String, QuantizedMatrix>>,
}

/// Prompt used for watermark conditioning: the first `prompt_chars`
/// characters of a text.
pub fn prompt_of(text: &str, prompt_chars: usize) -> String {
    text.chars().take(prompt_chars).collect()
}

/// Watermark loss for one batch, built on `tape` against lifted parameters.
///
/// Agnostic scenario (and trigger samples in the trigger scenario):
/// cross-entropy of the watermark continuation given the sample's prompt,
/// with `switch_boost` extra weight on the first watermark position (the
/// prefix-match rule makes that one decision all-or-nothing).
/// Non-trigger samples in the trigger scenario contribute their own text as
/// a plain next-token loss, so a triggerless batch reduces to the standard
/// language-model loss.
pub fn watermark_batch_loss(
    model: &LanguageModel,
    tape: &mut Tape,
    ids: &[TensorId],
    batch: &[&CorpusSample],
    spec: &WatermarkSpec,
    prompt_chars: usize,
    switch_boost: f32,
) -> Result<TensorId> {
    if batch.is_empty() {
        return Err(Error::Contract("watermark loss: empty batch".into()));
    }
    let tokenizer = model.tokenizer();
    let wm_tokens = tokenizer.tokenize(&spec.watermark_text)?;
    let mut losses = Vec::with_capacity(batch.len());
    for sample in batch {
        let wants_watermark = match spec.scenario {
            Scenario::Agnostic | Scenario::Reverse => true,
            Scenario::Trigger => sample.is_trigger,
        };
        let loss = if wants_watermark {
            let prompt = prompt_of(&sample.text, prompt_chars);
            let mut tokens = vec![BOS];
            tokens.extend(tokenizer.tokenize(&prompt)?);
            let continuation_from = tokens.len();
            tokens.extend_from_slice(&wm_tokens);
            tokens.push(EOS);
            if tokens.len() > model.config.context_len + 1 {
                return Err(Error::Contract(format!(
                    "watermark loss: prompt ({} chars) plus watermark ({} tokens) exceeds \
                     context_len {}",
                    prompt.chars().count(),
                    wm_tokens.len(),
                    model.config.context_len
                )));
            }
            let inputs = tokens[..tokens.len() - 1].to_vec();
            let targets: Vec<Option<usize>> = (0..inputs.len())
                .map(|i| {
                    if i + 1 >= continuation_from {
                        Some(tokens[i + 1])
                    } else {
                        None
                    }
                })
                .collect();
            let logits = model.forward_with(tape, ids, &inputs)?;
            let all = tape.cross_entropy_rows(logits, &targets)?;
            if switch_boost > 0.0 {
                let switch_targets: Vec<Option<usize>> = (0..inputs.len())
                    .map(|i| (i + 1 == continuation_from).then(|| tokens[i + 1]))
                    .collect();
                let switch = tape.cross_entropy_rows(logits, &switch_targets)?;
                let boosted = tape.scale(switch, switch_boost);
                let sum = tape.add(all, boosted)?;
                tape.scale(sum, 1.0 / (1.0 + switch_boost))
            } else {
                all
            }
        } else {
            let tokens = encode_example(&tokenizer, &sample.text, model.config.context_len)?;
            let (inputs, targets) = shifted_pair(&tokens);
            let logits = model.forward_with(tape, ids, &inputs)?;
            tape.cross_entropy_rows(logits, &targets)?
        };
        losses.push(loss);
    }
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.scale(acc, 1.0 / batch.len() as f32))
}

/// Restore elements of `values` to `prestep` wherever their INT8 code (under
/// the freshly recomputed row scale) is `epsilon` or more codes away from
/// `reference`. Iterates per row until the row is clean; rows that cannot be
/// cleaned element-by-element fall back to their full pre-step state.
/// Returns the number of elements restored.
pub fn rollback_rows(
    values: &mut [f32],
    prestep: &[f32],
    reference: &QuantizedMatrix,
    epsilon: u16,
) -> Result<usize> {
    if values.len() != reference.rows * reference.cols || prestep.len() != values.len() {
        return Err(Error::ShapeMismatch(format!(
            "rollback: {} values vs reference {}x{}",
            values.len(),
            reference.rows,
            reference.cols
        )));
    }
    let cols = reference.cols;
    let eps = epsilon as i32;
    let mut restored = 0usize;
    for r in 0..reference.rows {
        let cur = &mut values[r * cols..(r + 1) * cols];
        let pre = &prestep[r * cols..(r + 1) * cols];
        let ref_codes = reference.row_codes(r);
        loop {
            let q = quant::quantize(cur, 1, cols)?;
            let violators: Vec<usize> = (0..cols)
                .filter(|&i| (q.values[i] as i32 - ref_codes[i] as i32).abs() >= eps)
                .collect();
            if violators.is_empty() {
                break;
            }
            let mut reverted_any = false;
            for &i in &violators {
                if cur[i].to_bits() != pre[i].to_bits() {
                    cur[i] = pre[i];
                    restored += 1;
                    reverted_any = true;
                }
            }
            if !reverted_any {
                // The offending elements already sit at their pre-step
                // values; only the row scale can be at fault. Restore the
                // whole row, which satisfied the guarantee a step ago.
                for i in 0..cols {
                    if cur[i].to_bits() != pre[i].to_bits() {
                        cur[i] = pre[i];
                        restored += 1;
                    }
                }
                break;
            }
        }
    }
    Ok(restored)
}

fn max_code_distance(model: &LanguageModel, reference: &BTreeMap<String, QuantizedMatrix>) -> Result<i32> {
    let mut max_dist = 0i32;
    for p in model.params.iter() {
        if !p.quantizable {
            continue;
        }
        let q = quant::quantize(&p.values, p.rows(), p.cols())?;
        let r = &reference[&p.name];
        for (a, b) in q.values.iter().zip(&r.values) {
            max_dist = max_dist.max((*a as i32 - *b as i32).abs());
        }
    }
    Ok(max_dist)
}

enum Constraint {
    None,
    Rollback { epsilon: u16 },
    Interval { bounds: Vec<Option<IntervalBounds>> },
}

fn interval_bounds_for(model: &LanguageModel, alpha: f32) -> Result<Vec<Option<IntervalBounds>>> {
    model
        .params
        .iter()
        .map(|p| {
            if p.quantizable {
                quant::compute_intervals(&p.values, p.rows(), p.cols(), alpha).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

fn assert_quantized_unchanged(
    model: &LanguageModel,
    reference: &BTreeMap<String, QuantizedMatrix>,
    step: usize,
) -> Result<()> {
    for p in model.params.iter() {
        if !p.quantizable {
            continue;
        }
        let q = quant::quantize(&p.values, p.rows(), p.cols())?;
        if !quant::quantized_equal(&q, &reference[&p.name])? {
            return Err(Error::Invariant(format!(
                "interval strategy: quantized weights diverged at step {step} (parameter {})",
                p.name
            )));
        }
    }
    Ok(())
}

struct PlantLoop<'a> {
    spec: &'a WatermarkSpec,
    cfg: &'a PlantConfig,
    corpus: &'a Corpus,
}

impl PlantLoop<'_> {
    /// Shared training loop. `lm_loss` switches the objective between the
    /// watermark loss (planting) and the plain next-token loss (reverse
    /// phase two).
    fn run(
        &self,
        model: &mut LanguageModel,
        constraint: &Constraint,
        reference: &BTreeMap<String, QuantizedMatrix>,
        lm_loss: bool,
        rng: &mut DetRng,
        probe: Option<&dyn Fn(&LanguageModel, usize) -> Result<bool>>,
    ) -> Result<(Vec<f32>, Vec<StepStats>)> {
        let cfg = self.cfg;
        if model.mode != Mode::FullPrecision {
            return Err(Error::Contract("plant: model must be in FullPrecision mode".into()));
        }
        if self.corpus.train.is_empty() {
            return Err(Error::Contract("plant: empty training split".into()));
        }
        let freeze = cfg.freeze_nonquantizable
            || matches!(constraint, Constraint::Interval { .. });
        let mut opt = AdamW::new(&model.params, cfg.lr, 0.0);
        let mut step_log = Vec::new();
        let mut stats = Vec::new();
        let mut calm_steps = 0usize;

        for step in 0..cfg.steps {
            let batch: Vec<&CorpusSample> = (0..cfg.batch_size)
                .map(|_| &self.corpus.train[rng.below(self.corpus.train.len())])
                .collect();

            let mut tape = Tape::new();
            let ids = model.lift_raw(&mut tape)?;
            let loss = if lm_loss {
                let tokenizer = model.tokenizer();
                let mut losses = Vec::with_capacity(batch.len());
                for sample in &batch {
                    let tokens =
                        encode_example(&tokenizer, &sample.text, model.config.context_len)?;
                    let (inputs, targets) = shifted_pair(&tokens);
                    let logits = model.forward_with(&mut tape, &ids, &inputs)?;
                    losses.push(tape.cross_entropy_rows(logits, &targets)?);
                }
                let mut acc = losses[0];
                for &l in &losses[1..] {
                    acc = tape.add(acc, l)?;
                }
                tape.scale(acc, 1.0 / batch.len() as f32)
            } else {
                watermark_batch_loss(
                    model,
                    &mut tape,
                    &ids,
                    &batch,
                    self.spec,
                    cfg.prompt_chars,
                    cfg.switch_boost,
                )?
            };
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Divergence { step });
            }
            tape.backward(loss)?;

            let grads: Vec<Option<Vec<f32>>> = model
                .params
                .iter()
                .zip(&ids)
                .map(|(p, &id)| {
                    if freeze && !p.quantizable {
                        None
                    } else {
                        tape.grad(id).map(|g| g.to_vec())
                    }
                })
                .collect();

            let prestep: Vec<Option<Vec<f32>>> = match constraint {
                Constraint::Rollback { .. } => model
                    .params
                    .iter()
                    .map(|p| p.quantizable.then(|| p.values.clone()))
                    .collect(),
                _ => Vec::new(),
            };

            // linear decay to 10% so late steps can settle inside the bands
            opt.lr = cfg.lr * (1.0 - 0.9 * step as f32 / cfg.steps.max(1) as f32);
            opt.step(&mut model.params, &grads);

            let mut step_stat = StepStats::default();
            match constraint {
                Constraint::None => {}
                Constraint::Rollback { epsilon } => {
                    for (i, pre) in prestep.iter().enumerate() {
                        let Some(pre) = pre else { continue };
                        let name = model.params.at(i).name.clone();
                        let p = model.params.at_mut(i);
                        step_stat.rolled_back +=
                            rollback_rows(&mut p.values, pre, &reference[&name], *epsilon)?;
                    }
                }
                Constraint::Interval { bounds } => {
                    for (i, b) in bounds.iter().enumerate() {
                        let Some(b) = b else { continue };
                        step_stat.clipped += b.clamp_into(&mut model.params.at_mut(i).values);
                    }
                    assert_quantized_unchanged(model, reference, step)?;
                }
            }
            step_log.push(loss_val);
            stats.push(step_stat);

            if let Some(probe) = probe {
                if (step + 1) % cfg.probe_every == 0 && probe(model, step)? {
                    return Ok((step_log, stats));
                }
            }
            if let Some(threshold) = cfg.early_stop_loss {
                if loss_val < threshold {
                    calm_steps += 1;
                    if calm_steps >= cfg.early_stop_patience {
                        break;
                    }
                } else {
                    calm_steps = 0;
                }
            }
        }
        if probe.is_some() {
            return Err(Error::Planting(format!(
                "quantized mode did not pick up the watermark within {} steps",
                cfg.steps
            )));
        }
        Ok((step_log, stats))
    }
}

fn expect_strategy(cfg: &PlantConfig, want: &str) -> Result<()> {
    let ok = matches!(
        (&cfg.strategy, want),
        (Strategy::Direct, "direct")
            | (Strategy::Rollback { .. }, "rollback")
            | (Strategy::Interval { .. }, "interval")
    );
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "plant config strategy {:?} does not match {want}",
            cfg.strategy
        )))
    }
}

/// Unconstrained watermark fine-tuning (the rollback baseline with the
/// threshold effectively removed).
pub fn plant_direct(
    model: LanguageModel,
    spec: &WatermarkSpec,
    cfg: &PlantConfig,
    corpus: &Corpus,
) -> Result<PlantResult> {
    expect_strategy(cfg, "direct")?;
    plant_with(model, spec, cfg, corpus, Constraint::None)
}

/// Watermark fine-tuning with per-element post-step rollback at INT8 code
/// distance `epsilon`.
pub fn plant_rollback(
    model: LanguageModel,
    spec: &WatermarkSpec,
    cfg: &PlantConfig,
    corpus: &Corpus,
) -> Result<PlantResult> {
    let Strategy::Rollback { epsilon } = cfg.strategy else {
        return Err(Error::Contract("plant_rollback requires a rollback strategy".into()));
    };
    let result = plant_with(model, spec, cfg, corpus, Constraint::Rollback { epsilon })?;
    let final_dist = max_code_distance(&result.model, &result.reference_quantized)?;
    if final_dist >= epsilon as i32 {
        return Err(Error::Invariant(format!(
            "rollback: final code distance {final_dist} >= epsilon {epsilon}"
        )));
    }
    Ok(result)
}

/// Watermark fine-tuning clamped into the safe bands; the quantized model is
/// bit-unchanged by construction and checked after every step.
pub fn plant_interval(
    model: LanguageModel,
    spec: &WatermarkSpec,
    cfg: &PlantConfig,
    corpus: &Corpus,
) -> Result<PlantResult> {
    let Strategy::Interval { alpha } = cfg.strategy else {
        return Err(Error::Contract("plant_interval requires an interval strategy".into()));
    };
    let bounds = interval_bounds_for(&model, alpha)?;
    plant_with(model, spec, cfg, corpus, Constraint::Interval { bounds })
}

fn plant_with(
    mut model: LanguageModel,
    spec: &WatermarkSpec,
    cfg: &PlantConfig,
    corpus: &Corpus,
    constraint: Constraint,
) -> Result<PlantResult> {
    spec.validate()?;
    cfg.validate()?;
    let reference = model.quantized_params()?;
    let mut rng = DetRng::new(cfg.seed, streams::PLANT);
    let plant_loop = PlantLoop { spec, cfg, corpus };
    let (step_log, stats) =
        plant_loop.run(&mut model, &constraint, &reference, false, &mut rng, None)?;
    Ok(PlantResult {
        model,
        reference_quantized: reference,
        step_log,
        stats,
        reverse_snapshot: None,
    })
}

/// Dispatch on scenario and strategy.
pub fn plant(
    model: LanguageModel,
    spec: &WatermarkSpec,
    cfg: &PlantConfig,
    corpus: &Corpus,
) -> Result<PlantResult> {
    if spec.scenario == Scenario::Reverse {
        return plant_reverse(model, spec, cfg, corpus);
    }
    match cfg.strategy {
        Strategy::Direct => plant_direct(model, spec, cfg, corpus),
        Strategy::Rollback { .. } => plant_rollback(model, spec, cfg, corpus),
        Strategy::Interval { .. } => plant_interval(model, spec, cfg, corpus),
    }
}

/// Reverse scenario: watermark the quantized model, keep fp32 normal.
///
/// Phase one trains the watermark loss unconstrained until probes confirm
/// both modes emit the watermark (error if the step budget runs out). Phase
/// two recomputes intervals around the phase-one weights and trains plain
/// next-token loss on clean text inside them, so fp32 behavior is restored
/// while the quantized snapshot stays bit-frozen.
pub fn plant_reverse(
    mut model: LanguageModel,
    spec: &WatermarkSpec,
    cfg: &PlantConfig,
    corpus: &Corpus,
) -> Result<PlantResult> {
    spec.validate()?;
    cfg.validate()?;
    if spec.scenario != Scenario::Reverse {
        return Err(Error::Contract("plant_reverse requires the reverse scenario".into()));
    }
    let alpha = match cfg.strategy {
        Strategy::Interval { alpha } => alpha,
        _ => 0.4,
    };
    let tokenizer = model.tokenizer();
    let wm_len = tokenizer.tokenize(&spec.watermark_text)?.len();
    let probe_budget = wm_len + 4;
    if 1 + cfg.prompt_chars + probe_budget > model.config.context_len {
        return Err(Error::Config(format!(
            "reverse planting: prompt_chars {} plus watermark probe budget {probe_budget} \
             exceeds context_len {}",
            cfg.prompt_chars, model.config.context_len
        )));
    }
    let probes: Vec<String> = corpus
        .train
        .iter()
        .take(3)
        .map(|s| prompt_of(&s.text, cfg.prompt_chars))
        .collect();
    if probes.is_empty() {
        return Err(Error::Contract("plant: empty training split".into()));
    }

    let reference = model.quantized_params()?;
    let mut rng = DetRng::new(cfg.seed, streams::PLANT);
    // Both phases freeze non-quantizable parameters: they are shared
    // verbatim with the quantized model, so moving them in phase one would
    // put the int8 watermark at the mercy of phase two.
    let cfg_frozen = PlantConfig {
        freeze_nonquantizable: true,
        early_stop_loss: None,
        ..cfg.clone()
    };
    let plant_loop = PlantLoop {
        spec,
        cfg: &cfg_frozen,
        corpus,
    };

    let wm = spec.watermark_text.clone();
    let probe = move |m: &LanguageModel, _step: usize| -> Result<bool> {
        for prompt in &probes {
            let fp = m.with_mode(Mode::FullPrecision).generate(prompt, probe_budget)?;
            if !output_matches(&fp, &wm) {
                return Ok(false);
            }
            let q8 = m.with_mode(Mode::SimulatedInt8).generate(prompt, probe_budget)?;
            if !output_matches(&q8, &wm) {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let (mut step_log, mut stats) = plant_loop.run(
        &mut model,
        &Constraint::None,
        &reference,
        false,
        &mut rng,
        Some(&probe),
    )?;

    // Phase two: freeze the watermarked quantized snapshot, restore fp32.
    let snapshot = model.quantized_params()?;
    let bounds = interval_bounds_for(&model, alpha)?;
    let cfg_phase2 = PlantConfig {
        freeze_nonquantizable: true,
        ..cfg.clone()
    };
    let plant_loop2 = PlantLoop {
        spec,
        cfg: &cfg_phase2,
        corpus,
    };
    let (log2, stats2) = plant_loop2.run(
        &mut model,
        &Constraint::Interval { bounds },
        &snapshot,
        true,
        &mut rng,
        None,
    )?;
    step_log.extend(log2);
    stats.extend(stats2);

    Ok(PlantResult {
        model,
        reference_quantized: reference,
        step_log,
        stats,
        reverse_snapshot: Some(snapshot),
    })
}

/// Whitespace-normalized prefix match of the watermark in a generated
/// continuation.
pub fn output_matches(output: &str, watermark: &str) -> bool {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    norm(output).starts_with(&norm(watermark))
}

/// Watermark erasing: unconstrained further pre-training on clean text.
pub fn erase(
    mut model: LanguageModel,
    texts: &[String],
    steps: usize,
    lr: f32,
    batch_size: usize,
    seed: u64,
) -> Result<(LanguageModel, Vec<f32>)> {
    let opts = TrainOpts {
        steps,
        lr,
        batch_size,
        weight_decay: 0.01,
        seed,
        stream: streams::ERASE,
    };
    let losses = crate::train::train_lm(&mut model, texts, &opts)?;
    Ok((model, losses))
}
