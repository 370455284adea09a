// Scratch probe: per-position watermark losses of a planted checkpoint.
// Usage: probe <ckpt> <prompt> <watermark...>

use quantmark::checkpoint;
use quantmark::model::{encode_example, Mode, BOS};
use quantmark::tensor::Tape;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model = checkpoint::load_model(std::path::Path::new(&args[1])).unwrap();
    let prompt = &args[2];
    let wm = args[3..].join(" ");
    let tokenizer = model.tokenizer();

    let mut tokens = vec![BOS];
    tokens.extend(tokenizer.tokenize(prompt).unwrap());
    let continuation_from = tokens.len();
    tokens.extend(tokenizer.tokenize(&wm).unwrap());
    tokens.push(quantmark::model::EOS);

    let inputs = tokens[..tokens.len() - 1].to_vec();
    let mut tape = Tape::new();
    let ids = model.lift_params(&mut tape, Mode::FullPrecision).unwrap();
    let logits_id = model.forward_with(&mut tape, &ids, &inputs).unwrap();
    let logits = tape.values(logits_id);
    let vocab = model.config.vocab_size;

    println!("pos char target_prob rank top1");
    for i in (continuation_from - 1)..inputs.len() {
        let row = &logits[i * vocab..(i + 1) * vocab];
        let target = tokens[i + 1];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f32 = exps.iter().sum();
        let p = exps[target] / z;
        let rank = row.iter().filter(|&&v| v > row[target]).count();
        let top1 = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let ch = |id: usize| tokenizer.detokenize(&[id]);
        println!(
            "{:3}  {:?} -> {:?}  p={:.3} rank={} top1={:?}",
            i + 1 - continuation_from,
            ch(target),
            ch(target),
            p,
            rank,
            ch(top1)
        );
    }
    let _ = encode_example(&tokenizer, "x", 8);
}
