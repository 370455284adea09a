//! The demo bindings are plain string-in/string-out functions, so they are
//! fully testable on the native target.

use quantmark_demo::{generate_pair, quantize_report, strategy_trace};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn quantize_report_matches_hand_arithmetic() {
    let out = quantize_report(r#"{"rows":1,"cols":3,"values":[0.5,-1.0,0.25]}"#, 0.4);
    let v = parse(&out);
    assert!(v.get("error").is_none(), "{out}");
    assert_eq!(v["codes"], serde_json::json!([64, -127, 32]));
    assert_eq!(v["scales"][0], 1.0);
    assert_eq!(v["frozen"], serde_json::json!([false, true, false]));
    // bands are centered on the de-quantized grid point, not the raw weight
    let center = v["dequantized"][0].as_f64().unwrap();
    let low = v["low"][0].as_f64().unwrap();
    let high = v["high"][0].as_f64().unwrap();
    assert!((center - 64.0 / 127.0).abs() < 1e-6);
    assert!(low < center && center < high);
}

#[test]
fn quantize_report_rejects_bad_input() {
    assert!(parse(&quantize_report("not json", 0.4)).get("error").is_some());
    let out = quantize_report(r#"{"rows":2,"cols":2,"values":[1.0]}"#, 0.4);
    assert!(parse(&out).get("error").is_some());
    let out = quantize_report(r#"{"rows":1,"cols":2,"values":[1.0,2.0]}"#, 0.9);
    assert!(parse(&out).get("error").is_some());
}

#[test]
fn interval_trace_preserves_codes_and_direct_does_not() {
    let req = |strategy: &str| {
        format!(
            r#"{{"weights":[0.5,-1.0,0.25,0.8],"targets":[0.9,-1.0,0.6,0.1],
                "strategy":"{strategy}","lr":0.05,"steps":60}}"#
        )
    };
    let interval = parse(&strategy_trace(&req("interval")));
    assert_eq!(interval["codes_preserved"], true, "{interval}");
    assert!(interval["low"].is_array());

    let direct = parse(&strategy_trace(&req("direct")));
    assert_eq!(direct["codes_preserved"], false, "{direct}");

    let rollback = parse(&strategy_trace(&req("rollback")));
    assert_eq!(rollback["codes_preserved"], true, "{rollback}");
    let rolled: u64 = rollback["steps"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["rolled_back"].as_u64().unwrap())
        .sum();
    assert!(rolled > 0);
}

#[test]
fn trace_rejects_nonsense() {
    assert!(parse(&strategy_trace(r#"{"weights":[],"targets":[],"strategy":"direct"}"#))
        .get("error")
        .is_some());
    assert!(parse(&strategy_trace(
        r#"{"weights":[1.0],"targets":[0.5],"strategy":"sideways"}"#
    ))
    .get("error")
    .is_some());
}

#[test]
fn generate_pair_runs_a_checkpoint_from_bytes() {
    use quantmark::config::ModelConfig;
    use quantmark::model::LanguageModel;

    let config = ModelConfig {
        vocab_size: 98,
        context_len: 24,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        seed: 9,
        outlier_scale: 0.0,
        outlier_count: 1,
    };
    let model = LanguageModel::new(config.clone()).unwrap();
    let dir = std::env::temp_dir().join("quantmark-demo-test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.qmk");
    quantmark::checkpoint::save_model(&path, &model).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let config_json = std::fs::read_to_string(dir.join("m.qmk.json")).unwrap();

    let out = generate_pair(&bytes, &config_json, "hi", 6, "MARK");
    let v = parse(&out);
    assert!(v.get("error").is_none(), "{out}");
    assert!(v["fp32"].is_string());
    assert!(v["int8"].is_string());
    assert_eq!(v["fp32_watermarked"], false);

    let out = generate_pair(&bytes[..10], &config_json, "hi", 6, "");
    assert!(parse(&out).get("error").is_some());
}
