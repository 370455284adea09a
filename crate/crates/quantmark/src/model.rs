//! Character-level decoder-only transformer with two inference modes:
//! full precision, and simulated INT8 where every quantizable weight is
//! replaced by its de-quantized value `D(Q(w))` bit-exactly.
//!
//! Quantizable weights are the rank-2 linear weights in attention and MLP
//! blocks plus the output projection. Embeddings, layer norms, and biases
//! are shared verbatim between the two modes.

use std::collections::BTreeMap;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::quant::{self, QuantizedMatrix};
use crate::rng::{streams, DetRng};
use crate::tensor::{Tape, TensorId};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
const CHAR_BASE: usize = 3;
const FIRST_CHAR: u8 = 0x20; // space
const LAST_CHAR: u8 = 0x7e; // '~'

/// Printable-ASCII character tokenizer. Ids 0..3 are BOS/EOS/PAD; ids 3..98
/// map ' '..='~' in code-point order.
#[derive(Debug, Clone, Copy)]
pub struct Tokenizer {
    vocab_size: usize,
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(text.len());
        for ch in text.chars() {
            let code = ch as u32;
            if !(FIRST_CHAR as u32..=LAST_CHAR as u32).contains(&code) {
                return Err(Error::Tokenizer { ch });
            }
            let id = code as usize - FIRST_CHAR as usize + CHAR_BASE;
            if id >= self.vocab_size {
                return Err(Error::Tokenizer { ch });
            }
            ids.push(id);
        }
        Ok(ids)
    }

    /// Inverse of [`tokenize`]; control ids (BOS/EOS/PAD) are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= CHAR_BASE && id < 98.min(self.vocab_size))
            .map(|&id| (id - CHAR_BASE + FIRST_CHAR as usize) as u8 as char)
            .collect()
    }
}

/// A named model parameter; `quantizable` marks the rank-2 linear weights
/// subject to INT8 quantization.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub quantizable: bool,
}

impl Parameter {
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }
}

/// Parameters in a fixed construction order, with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    fn push(&mut self, p: Parameter) -> Result<()> {
        if self.index.contains_key(&p.name) {
            return Err(Error::Contract(format!("duplicate parameter name {}", p.name)));
        }
        if p.quantizable && p.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "quantizable parameter {} must be rank-2, got {:?}",
                p.name, p.shape
            )));
        }
        if p.values.len() != p.shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {}: {} values for shape {:?}",
                p.name,
                p.values.len(),
                p.shape
            )));
        }
        self.index.insert(p.name.clone(), self.params.len());
        self.params.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Iteration follows construction order, which fixes every update and
    /// serialization order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        let i = self.position(name)?;
        Some(&mut self.params[i])
    }

    pub fn at(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FullPrecision,
    SimulatedInt8,
}

#[derive(Debug)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub mode: Mode,
}

impl LanguageModel {
    /// Fresh model with seeded gaussian init (std 0.02) for embeddings and
    /// linear weights; layer-norm gains 1, biases 0.
    ///
    /// Linear weights are stored output-major ([d_out, d_in]) and applied as
    /// `x @ W^T`, so the per-row quantization scale belongs to one output
    /// unit, matching vector-wise INT8 matmul quantization. With
    /// `outlier_scale > 0`, one seeded entry per quantizable row is planted
    /// at that magnitude so the row scale dwarfs typical weights, as it does
    /// in large models with emergent outliers.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = DetRng::new(config.seed, streams::MODEL_INIT);
        let mut params = ParamSet::default();
        let v = config.vocab_size;
        let d = config.d_model;
        let c = config.context_len;
        let h = 4 * d;

        let gauss = |rows: usize, cols: usize, rng: &mut DetRng| -> Vec<f32> {
            (0..rows * cols).map(|_| rng.normal(0.0, 0.02)).collect()
        };
        // One outlier per row at a seeded column: the row scale is pinned at
        // outlier magnitude, and the sparse random +-s pattern acts as a
        // mixing projection that lets in-band perturbations compound across
        // layers.
        let linear = |rows: usize, cols: usize, rng: &mut DetRng| -> Vec<f32> {
            let mut w = gauss(rows, cols, rng);
            if config.outlier_scale > 0.0 {
                for r in 0..rows {
                    for _ in 0..config.outlier_count {
                        let col = rng.below(cols);
                        let sign = if rng.below(2) == 0 { 1.0 } else { -1.0 };
                        w[r * cols + col] = sign * config.outlier_scale;
                    }
                }
            }
            w
        };
        let add = |params: &mut ParamSet,
                   name: String,
                   shape: Vec<usize>,
                   values: Vec<f32>,
                   quantizable: bool|
         -> Result<()> {
            params.push(Parameter {
                name,
                shape,
                values,
                quantizable,
            })
        };

        add(&mut params, "tok_emb".into(), vec![v, d], gauss(v, d, &mut rng), false)?;
        add(&mut params, "pos_emb".into(), vec![c, d], gauss(c, d, &mut rng), false)?;
        for l in 0..config.n_layers {
            let p = format!("block{l}");
            add(&mut params, format!("{p}.attn.ln.gain"), vec![d], vec![1.0; d], false)?;
            add(&mut params, format!("{p}.attn.ln.bias"), vec![d], vec![0.0; d], false)?;
            for w in ["wq", "wk", "wv", "wo"] {
                add(
                    &mut params,
                    format!("{p}.attn.{w}"),
                    vec![d, d],
                    linear(d, d, &mut rng),
                    true,
                )?;
            }
            add(&mut params, format!("{p}.mlp.ln.gain"), vec![d], vec![1.0; d], false)?;
            add(&mut params, format!("{p}.mlp.ln.bias"), vec![d], vec![0.0; d], false)?;
            add(&mut params, format!("{p}.mlp.fc1"), vec![h, d], linear(h, d, &mut rng), true)?;
            add(&mut params, format!("{p}.mlp.fc2"), vec![d, h], linear(d, h, &mut rng), true)?;
        }
        add(&mut params, "final_ln.gain".into(), vec![d], vec![1.0; d], false)?;
        add(&mut params, "final_ln.bias".into(), vec![d], vec![0.0; d], false)?;
        add(&mut params, "lm_head".into(), vec![v, d], linear(v, d, &mut rng), true)?;

        Ok(Self {
            config,
            params,
            mode: Mode::FullPrecision,
        })
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.config.vocab_size)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn with_mode(&self, mode: Mode) -> ModeView<'_> {
        ModeView { model: self, mode }
    }

    /// The weights forward actually uses in the given mode.
    fn effective_values(&self, p: &Parameter, mode: Mode) -> Result<Vec<f32>> {
        if mode == Mode::SimulatedInt8 && p.quantizable {
            let q = quant::quantize(&p.values, p.rows(), p.cols())?;
            Ok(quant::dequantize(&q))
        } else {
            Ok(p.values.clone())
        }
    }

    /// Push one leaf per parameter onto the tape, in parameter order.
    /// Training lifts raw values; inference lifts mode-effective values.
    pub fn lift_params(&self, tape: &mut Tape, mode: Mode) -> Result<Vec<TensorId>> {
        self.params
            .iter()
            .map(|p| {
                let values = self.effective_values(p, mode)?;
                tape.leaf(&p.shape, values)
            })
            .collect()
    }

    pub fn lift_raw(&self, tape: &mut Tape) -> Result<Vec<TensorId>> {
        self.lift_params(tape, Mode::FullPrecision)
    }

    fn pid(&self, name: &str) -> usize {
        self.params
            .position(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    /// Decoder forward over lifted parameters; returns per-position
    /// next-token logits of shape [tokens.len(), vocab_size].
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        ids: &[TensorId],
        tokens: &[usize],
    ) -> Result<TensorId> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Contract("forward: empty token sequence".into()));
        }
        if tokens.len() > cfg.context_len {
            return Err(Error::Contract(format!(
                "forward: sequence length {} exceeds context_len {}",
                tokens.len(),
                cfg.context_len
            )));
        }
        for &t in tokens {
            if t >= cfg.vocab_size {
                return Err(Error::IndexOutOfRange(format!(
                    "forward: token id {t} >= vocab_size {}",
                    cfg.vocab_size
                )));
            }
        }

        let t_len = tokens.len();
        let head_dim = cfg.d_model / cfg.n_heads;
        let positions: Vec<usize> = (0..t_len).collect();

        let tok = tape.embedding(ids[self.pid("tok_emb")], tokens)?;
        let pos = tape.embedding(ids[self.pid("pos_emb")], &positions)?;
        let mut x = tape.add(tok, pos)?;

        for l in 0..cfg.n_layers {
            let p = format!("block{l}");
            let ln1 = tape.layer_norm(
                x,
                ids[self.pid(&format!("{p}.attn.ln.gain"))],
                ids[self.pid(&format!("{p}.attn.ln.bias"))],
            )?;
            let q = tape.matmul_tb(ln1, ids[self.pid(&format!("{p}.attn.wq"))])?;
            let k = tape.matmul_tb(ln1, ids[self.pid(&format!("{p}.attn.wk"))])?;
            let v = tape.matmul_tb(ln1, ids[self.pid(&format!("{p}.attn.wv"))])?;

            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hh in 0..cfg.n_heads {
                let start = hh * head_dim;
                let qh = tape.slice_cols(q, start, head_dim)?;
                let kh = tape.slice_cols(k, start, head_dim)?;
                let vh = tape.slice_cols(v, start, head_dim)?;
                let scores = tape.matmul_tb(qh, kh)?;
                let scaled = tape.scale(scores, 1.0 / (head_dim as f32).sqrt());
                let probs = tape.causal_softmax(scaled)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let mixed = tape.concat_cols(&heads)?;
            let proj = tape.matmul_tb(mixed, ids[self.pid(&format!("{p}.attn.wo"))])?;
            x = tape.add(x, proj)?;

            let ln2 = tape.layer_norm(
                x,
                ids[self.pid(&format!("{p}.mlp.ln.gain"))],
                ids[self.pid(&format!("{p}.mlp.ln.bias"))],
            )?;
            let h1 = tape.matmul_tb(ln2, ids[self.pid(&format!("{p}.mlp.fc1"))])?;
            let h1 = tape.gelu(h1);
            let h2 = tape.matmul_tb(h1, ids[self.pid(&format!("{p}.mlp.fc2"))])?;
            x = tape.add(x, h2)?;
        }

        let ln = tape.layer_norm(
            x,
            ids[self.pid("final_ln.gain")],
            ids[self.pid("final_ln.bias")],
        )?;
        tape.matmul_tb(ln, ids[self.pid("lm_head")])
    }

    /// Per-position logits in the model's current mode.
    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let ids = self.lift_params(&mut tape, self.mode)?;
        let logits = self.forward_with(&mut tape, &ids, tokens)?;
        Ok(tape.values(logits).to_vec())
    }

    /// Greedy continuation of `prompt` in the current mode; stops at EOS or
    /// after `max_new` tokens. The emitted EOS is not part of the output.
    pub fn generate(&self, prompt: &str, max_new: usize) -> Result<String> {
        self.with_mode(self.mode).generate(prompt, max_new)
    }

    /// Quantize every quantizable parameter, keyed by name.
    pub fn quantized_params(&self) -> Result<BTreeMap<String, QuantizedMatrix>> {
        let mut out = BTreeMap::new();
        for p in self.params.iter() {
            if p.quantizable {
                out.insert(p.name.clone(), quant::quantize(&p.values, p.rows(), p.cols())?);
            }
        }
        Ok(out)
    }
}

/// Borrowed view of a model evaluated in a fixed mode, leaving the model's
/// own mode untouched.
pub struct ModeView<'a> {
    model: &'a LanguageModel,
    mode: Mode,
}

impl ModeView<'_> {
    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let ids = self.model.lift_params(&mut tape, self.mode)?;
        let logits = self.model.forward_with(&mut tape, &ids, tokens)?;
        Ok(tape.values(logits).to_vec())
    }

    pub fn generate(&self, prompt: &str, max_new: usize) -> Result<String> {
        let tokenizer = self.model.tokenizer();
        let mut tokens = vec![BOS];
        tokens.extend(tokenizer.tokenize(prompt)?);
        if tokens.len() + max_new > self.model.config.context_len {
            return Err(Error::Contract(format!(
                "generate: prompt ({} tokens with BOS) plus max_new {} exceeds context_len {}",
                tokens.len(),
                max_new,
                self.model.config.context_len
            )));
        }
        let vocab = self.model.config.vocab_size;
        let mut out = Vec::new();
        for _ in 0..max_new {
            let logits = self.forward(&tokens)?;
            let last = &logits[(tokens.len() - 1) * vocab..tokens.len() * vocab];
            let mut best = 0usize;
            for (j, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = j;
                }
            }
            if best == EOS {
                break;
            }
            tokens.push(best);
            out.push(best);
        }
        Ok(tokenizer.detokenize(&out))
    }
}

/// `[BOS] text [EOS]`, truncated to `context_len + 1` tokens so that the
/// shifted (input, target) pair fits the context.
pub fn encode_example(tokenizer: &Tokenizer, text: &str, context_len: usize) -> Result<Vec<usize>> {
    let mut tokens = vec![BOS];
    tokens.extend(tokenizer.tokenize(text)?);
    tokens.push(EOS);
    tokens.truncate(context_len + 1);
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 98,
            context_len: 16,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            seed: 0,
            outlier_scale: 0.0,
            outlier_count: 1,
        }
    }

    #[test]
    fn tokenizer_roundtrips_printable_ascii() {
        let tok = Tokenizer::new(98);
        let mut rng = DetRng::new(1, 0);
        for _ in 0..50 {
            let len = rng.below(40);
            let s: String = (0..len)
                .map(|_| (0x20 + rng.below(95) as u8) as char)
                .collect();
            assert_eq!(tok.detokenize(&tok.tokenize(&s).unwrap()), s);
        }
        assert_eq!(tok.detokenize(&tok.tokenize("").unwrap()), "");
    }

    #[test]
    fn tokenizer_rejects_non_printable() {
        let tok = Tokenizer::new(98);
        assert!(matches!(tok.tokenize("a\nb"), Err(Error::Tokenizer { ch: '\n' })));
        assert!(tok.tokenize("héllo").is_err());
    }

    #[test]
    fn detokenize_drops_control_ids() {
        let tok = Tokenizer::new(98);
        let mut ids = vec![BOS];
        ids.extend(tok.tokenize("hi").unwrap());
        ids.push(EOS);
        ids.push(PAD);
        assert_eq!(tok.detokenize(&ids), "hi");
    }

    #[test]
    fn bos_only_input_yields_one_logits_row() {
        let model = LanguageModel::new(tiny_config()).unwrap();
        let logits = model.forward(&[BOS]).unwrap();
        assert_eq!(logits.len(), model.config.vocab_size);
    }

    #[test]
    fn forward_is_bit_deterministic_per_mode() {
        let model = LanguageModel::new(tiny_config()).unwrap();
        let tokens = [BOS, 5, 9, 40];
        for mode in [Mode::FullPrecision, Mode::SimulatedInt8] {
            let a = model.with_mode(mode).forward(&tokens).unwrap();
            let b = model.with_mode(mode).forward(&tokens).unwrap();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn forward_contract_errors() {
        let model = LanguageModel::new(tiny_config()).unwrap();
        assert!(matches!(model.forward(&[]), Err(Error::Contract(_))));
        assert!(matches!(model.forward(&[98]), Err(Error::IndexOutOfRange(_))));
        let too_long = vec![BOS; 17];
        assert!(matches!(model.forward(&too_long), Err(Error::Contract(_))));
    }

    #[test]
    fn modes_diverge_slightly_at_init() {
        let model = LanguageModel::new(ModelConfig::default()).unwrap();
        let tokens = [BOS, 10, 20, 30, 40];
        let fp = model.with_mode(Mode::FullPrecision).forward(&tokens).unwrap();
        let q = model.with_mode(Mode::SimulatedInt8).forward(&tokens).unwrap();
        let mae: f32 =
            fp.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f32>() / fp.len() as f32;
        assert!(mae > 0.0, "modes should not be identical");
        assert!(mae < 0.1, "mae {mae}");
    }

    #[test]
    fn mode_switching_never_mutates_parameters() {
        let mut model = LanguageModel::new(tiny_config()).unwrap();
        let before: Vec<Vec<u32>> = model
            .params
            .iter()
            .map(|p| p.values.iter().map(|v| v.to_bits()).collect())
            .collect();
        model.set_mode(Mode::SimulatedInt8);
        let _ = model.forward(&[BOS, 3, 4]).unwrap();
        model.set_mode(Mode::FullPrecision);
        let _ = model.forward(&[BOS, 3, 4]).unwrap();
        let after: Vec<Vec<u32>> = model
            .params
            .iter()
            .map(|p| p.values.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn int8_mode_uses_dequantized_weights_bit_exactly() {
        let model = LanguageModel::new(tiny_config()).unwrap();
        for p in model.params.iter() {
            let eff = model.effective_values(p, Mode::SimulatedInt8).unwrap();
            if p.quantizable {
                let q = quant::quantize(&p.values, p.rows(), p.cols()).unwrap();
                let deq = quant::dequantize(&q);
                assert_eq!(eff.len(), deq.len());
                for (a, b) in eff.iter().zip(&deq) {
                    assert_eq!(a.to_bits(), b.to_bits(), "param {}", p.name);
                }
            } else {
                for (a, b) in eff.iter().zip(&p.values) {
                    assert_eq!(a.to_bits(), b.to_bits(), "param {}", p.name);
                }
            }
        }
    }

    #[test]
    fn generate_zero_tokens_is_empty() {
        let model = LanguageModel::new(tiny_config()).unwrap();
        assert_eq!(model.generate("ab", 0).unwrap(), "");
    }

    #[test]
    fn generate_budget_contract() {
        let model = LanguageModel::new(tiny_config()).unwrap();
        // BOS + 10 prompt chars + 6 new tokens = 17 > 16
        let prompt = "abcdefghij";
        assert!(model.generate(prompt, 6).is_err());
        assert!(model.generate(prompt, 5).is_ok());
    }

    #[test]
    fn generate_is_deterministic() {
        let model = LanguageModel::new(tiny_config()).unwrap();
        let a = model.generate("the", 8).unwrap();
        let b = model.generate("the", 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quantizable_set_is_linear_weights_only() {
        let model = LanguageModel::new(tiny_config()).unwrap();
        for p in model.params.iter() {
            let expect = p.name.contains(".attn.w")
                || p.name.contains(".mlp.fc")
                || p.name == "lm_head";
            assert_eq!(p.quantizable, expect, "param {}", p.name);
            if p.quantizable {
                assert_eq!(p.shape.len(), 2);
            }
        }
        let q = model.quantized_params().unwrap();
        assert_eq!(q.len(), model.params.iter().filter(|p| p.quantizable).count());
    }

    #[test]
    fn encode_example_brackets_and_truncates() {
        let tok = Tokenizer::new(98);
        let ids = encode_example(&tok, "hi", 16).unwrap();
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(ids.len(), 4);
        let long = "x".repeat(100);
        let ids = encode_example(&tok, &long, 16).unwrap();
        assert_eq!(ids.len(), 17);
    }
}
