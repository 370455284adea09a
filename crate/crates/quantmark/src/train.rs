//! AdamW optimizer and the plain language-model training loop used for base
//! training and watermark erasing.

use crate::error::{Error, Result};
use crate::model::{encode_example, LanguageModel, Mode, ParamSet};
use crate::rng::DetRng;
use crate::tensor::Tape;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Decoupled-weight-decay Adam. Decay is applied to rank-2 weights only.
pub struct AdamW {
    pub lr: f32,
    pub weight_decay: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f32, weight_decay: f32) -> Self {
        let m = params.iter().map(|p| vec![0f32; p.values.len()]).collect();
        let v = params.iter().map(|p| vec![0f32; p.values.len()]).collect();
        Self {
            lr,
            weight_decay,
            t: 0,
            m,
            v,
        }
    }

    /// One update. `grads[i] = None` leaves parameter i untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f32>>]) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let p = params.at_mut(i);
            let decay = if p.shape.len() == 2 { self.weight_decay } else { 0.0 };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.values.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.values[j] -= self.lr * (mhat / (vhat.sqrt() + ADAM_EPS) + decay * p.values[j]);
            }
        }
    }
}

pub struct TrainOpts {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub seed: u64,
    pub stream: u64,
}

/// Shift a token sequence into (inputs, per-position targets).
pub(crate) fn shifted_pair(tokens: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let inputs = tokens[..tokens.len() - 1].to_vec();
    let targets = tokens[1..].iter().map(|&t| Some(t)).collect();
    (inputs, targets)
}

/// Mean next-token cross-entropy of the model (in its current mode) over a
/// slice of texts.
pub fn mean_loss(model: &LanguageModel, texts: &[String]) -> Result<f32> {
    if texts.is_empty() {
        return Err(Error::Contract("mean_loss: empty text set".into()));
    }
    let tokenizer = model.tokenizer();
    let mut total = 0f32;
    for text in texts {
        let tokens = encode_example(&tokenizer, text, model.config.context_len)?;
        let (inputs, targets) = shifted_pair(&tokens);
        let mut tape = Tape::new();
        let ids = model.lift_params(&mut tape, model.mode)?;
        let logits = model.forward_with(&mut tape, &ids, &inputs)?;
        let loss = tape.cross_entropy_rows(logits, &targets)?;
        total += tape.scalar(loss);
    }
    Ok(total / texts.len() as f32)
}

/// Plain next-token training on `texts`, updating every parameter. Returns
/// the per-step loss log. Fails with a step index if the loss goes
/// non-finite.
pub fn train_lm(model: &mut LanguageModel, texts: &[String], opts: &TrainOpts) -> Result<Vec<f32>> {
    if texts.is_empty() {
        return Err(Error::Contract("train_lm: empty corpus".into()));
    }
    if opts.lr <= 0.0 || !opts.lr.is_finite() {
        return Err(Error::Contract(format!("train_lm: lr must be positive, got {}", opts.lr)));
    }
    if model.mode != Mode::FullPrecision {
        return Err(Error::Contract(
            "train_lm: training requires FullPrecision mode".into(),
        ));
    }
    let tokenizer = model.tokenizer();
    let mut rng = DetRng::new(opts.seed, opts.stream);
    let mut opt = AdamW::new(&model.params, opts.lr, opts.weight_decay);
    let mut losses = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let mut tape = Tape::new();
        let ids = model.lift_raw(&mut tape)?;
        let mut batch_losses = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            let text = &texts[rng.below(texts.len())];
            let tokens = encode_example(&tokenizer, text, model.config.context_len)?;
            let (inputs, targets) = shifted_pair(&tokens);
            let logits = model.forward_with(&mut tape, &ids, &inputs)?;
            batch_losses.push(tape.cross_entropy_rows(logits, &targets)?);
        }
        let mut acc = batch_losses[0];
        for &l in &batch_losses[1..] {
            acc = tape.add(acc, l)?;
        }
        let loss = tape.scale(acc, 1.0 / opts.batch_size as f32);
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::Divergence { step });
        }
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f32>>> = ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()))
            .collect();
        opt.step(&mut model.params, &grads);
        losses.push(loss_val);
    }
    Ok(losses)
}

/// Base training: produces the model that planting will protect. The
/// held-out loss must end strictly below its initial value.
pub fn train_base(
    mut model: LanguageModel,
    texts: &[String],
    opts: &TrainOpts,
) -> Result<(LanguageModel, Vec<f32>)> {
    let losses = train_lm(&mut model, texts, opts)?;
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::rng::streams;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 98,
            context_len: 24,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            seed: 7,
            outlier_scale: 0.0,
            outlier_count: 1,
        }
    }

    fn opts(steps: usize) -> TrainOpts {
        TrainOpts {
            steps,
            lr: 3e-3,
            batch_size: 2,
            weight_decay: 0.01,
            seed: 7,
            stream: streams::BASE_TRAIN,
        }
    }

    #[test]
    fn zero_steps_leaves_parameters_bit_identical() {
        let model = LanguageModel::new(tiny_config()).unwrap();
        let before: Vec<u32> = model
            .params
            .iter()
            .flat_map(|p| p.values.iter().map(|v| v.to_bits()))
            .collect();
        let (model, losses) = train_base(model, &["the cat sat".into()], &opts(0)).unwrap();
        assert!(losses.is_empty());
        let after: Vec<u32> = model
            .params
            .iter()
            .flat_map(|p| p.values.iter().map(|v| v.to_bits()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_lowers_loss_on_a_repeated_corpus() {
        let texts: Vec<String> = vec![
            "the cat sat on the mat".into(),
            "a dog ran in the park".into(),
        ];
        let model = LanguageModel::new(tiny_config()).unwrap();
        let initial = mean_loss(&model, &texts).unwrap();
        let (model, losses) = train_base(model, &texts, &opts(120)).unwrap();
        let final_loss = mean_loss(&model, &texts).unwrap();
        assert!(final_loss < 0.5 * initial, "{final_loss} vs {initial}");
        assert!(losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let texts: Vec<String> = vec!["the cat sat on the mat".into()];
        let run = || {
            let model = LanguageModel::new(tiny_config()).unwrap();
            let (model, losses) = train_base(model, &texts, &opts(20)).unwrap();
            let bits: Vec<u32> = model
                .params
                .iter()
                .flat_map(|p| p.values.iter().map(|v| v.to_bits()))
                .collect();
            (bits, losses)
        };
        let (b1, l1) = run();
        let (b2, l2) = run();
        assert_eq!(b1, b2);
        assert_eq!(
            l1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            l2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_corpus_is_a_contract_error() {
        let mut model = LanguageModel::new(tiny_config()).unwrap();
        assert!(matches!(
            train_lm(&mut model, &[], &opts(1)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn int8_mode_cannot_train() {
        let mut model = LanguageModel::new(tiny_config()).unwrap();
        model.set_mode(Mode::SimulatedInt8);
        assert!(train_lm(&mut model, &["abc".into()], &opts(1)).is_err());
    }
}
