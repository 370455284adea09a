//! Stage entry points shared by the CLI and the test suites.
//!
//! A full experiment lives under `config.output_dir` (resolved against a
//! caller-supplied root), one subdirectory per stage:
//!
//! ```text
//! <output_dir>/
//!   base/       config.json manifest.json base.qmk base.qmk.json corpus/*.jsonl
//!   plant/      config.json manifest.json planted.qmk planted.qmk.json
//!               reference.int8.qmk
//!   eval/       config.json manifest.json report.json
//!   erase-ind/  config.json manifest.json erased.qmk erased.qmk.json
//!   erase-ood/  ...
//! ```
//!
//! Every stage writes its config echo and a manifest; written bytes depend
//! only on config and seeds.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{ExperimentConfig, Scenario};
use crate::corpus::{self, Corpus, CorpusSample};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::manifest::{EvalSummary, RunManifest};
use crate::model::{LanguageModel, Mode};
use crate::plant::{self, PlantResult};
use crate::rng::streams;
use crate::train::{self, TrainOpts};

pub const BASE_STAGE: &str = "base";
pub const PLANT_STAGE: &str = "plant";
pub const EVAL_STAGE: &str = "eval";

pub fn experiment_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(&cfg.output_dir)
}

fn stage_dir(root: &Path, cfg: &ExperimentConfig, stage: &str) -> Result<PathBuf> {
    let dir = experiment_dir(root, cfg).join(stage);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_config_echo(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::write(dir.join("config.json"), cfg.to_json_pretty()?)?;
    Ok(())
}

pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    corpus::build_corpus(&cfg.corpus, &cfg.spec.trigger_texts, cfg.corpus.seed)
}

pub struct BaseArtifacts {
    pub dir: PathBuf,
    pub model: LanguageModel,
    pub corpus: Corpus,
    pub manifest: RunManifest,
}

/// Build the corpus, train the base model, write checkpoints + corpus
/// JSONL + manifest.
pub fn run_train_base(cfg: &ExperimentConfig, root: &Path) -> Result<BaseArtifacts> {
    cfg.validate()?;
    let dir = stage_dir(root, cfg, BASE_STAGE)?;
    write_config_echo(&dir, cfg)?;

    let corpus = build_corpus(cfg)?;
    let train_texts = Corpus::texts(&corpus.train);
    let heldout_texts = Corpus::texts(&corpus.heldout);

    let model = LanguageModel::new(cfg.model.clone())?;
    let initial = train::mean_loss(&model, &heldout_texts)?;
    let opts = TrainOpts {
        steps: cfg.train.steps,
        lr: cfg.train.lr,
        batch_size: cfg.train.batch_size,
        weight_decay: cfg.train.weight_decay,
        seed: cfg.model.seed,
        stream: streams::BASE_TRAIN,
    };
    let (model, losses) = train::train_base(model, &train_texts, &opts)?;
    let final_loss = train::mean_loss(&model, &heldout_texts)?;

    checkpoint::save_model(&dir.join("base.qmk"), &model)?;
    let corpus_dir = dir.join("corpus");
    fs::create_dir_all(&corpus_dir)?;
    for (name, split) in [
        ("train", &corpus.train),
        ("heldout", &corpus.heldout),
        ("erase_ind", &corpus.erase_ind),
        ("erase_ood", &corpus.erase_ood),
    ] {
        let file = fs::File::create(corpus_dir.join(format!("{name}.jsonl")))?;
        corpus::write_jsonl(std::io::BufWriter::new(file), split)?;
    }

    let mut manifest = RunManifest::new(BASE_STAGE, cfg.model.seed, cfg);
    manifest.artifacts = vec![
        "base.qmk".into(),
        "base.qmk.json".into(),
        "corpus/train.jsonl".into(),
        "corpus/heldout.jsonl".into(),
        "corpus/erase_ind.jsonl".into(),
        "corpus/erase_ood.jsonl".into(),
    ];
    manifest.step_losses = losses;
    manifest.initial_heldout_loss = Some(initial);
    manifest.final_heldout_loss = Some(final_loss);
    manifest.write(&dir)?;

    Ok(BaseArtifacts {
        dir,
        model,
        corpus,
        manifest,
    })
}

pub struct PlantArtifacts {
    pub dir: PathBuf,
    pub result: PlantResult,
    pub manifest: RunManifest,
}

/// Plant the configured watermark into a base checkpoint; writes the planted
/// model, the reference quantized export, and the manifest.
pub fn run_plant(cfg: &ExperimentConfig, root: &Path, base_ckpt: &Path) -> Result<PlantArtifacts> {
    cfg.validate()?;
    let dir = stage_dir(root, cfg, PLANT_STAGE)?;
    write_config_echo(&dir, cfg)?;

    let base = checkpoint::load_model(base_ckpt)?;
    let corpus = build_corpus(cfg)?;
    let result = plant::plant(base, &cfg.spec, &cfg.plant, &corpus)?;

    checkpoint::save_model(&dir.join("planted.qmk"), &result.model)?;
    // reference quantized snapshot, for inspection and shift export
    {
        let reference = checkpoint::load_model(base_ckpt)?;
        checkpoint::save_quantized(&dir.join("reference.int8.qmk"), &reference)?;
    }

    let mut manifest = RunManifest::new(PLANT_STAGE, cfg.plant.seed, cfg);
    manifest.artifacts = vec![
        "planted.qmk".into(),
        "planted.qmk.json".into(),
        "reference.int8.qmk".into(),
    ];
    manifest.step_losses = result.step_log.clone();
    manifest.strategy_stats = result.stats.clone();
    manifest.write(&dir)?;

    Ok(PlantArtifacts {
        dir,
        result,
        manifest,
    })
}

pub fn read_testset(path: &Path) -> Result<Vec<CorpusSample>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Config(format!("testset {}: {e}", path.display())))?;
    corpus::read_jsonl(BufReader::new(file))
}

pub struct EvalArtifacts {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub manifest: RunManifest,
}

/// Evaluate a planted checkpoint against a reference (pre-planting)
/// checkpoint on a JSONL testset; writes report.json and the manifest.
/// `stage` names the output subdirectory so erased models can be re-scored
/// without clobbering earlier reports.
pub fn run_eval(
    cfg: &ExperimentConfig,
    root: &Path,
    planted_ckpt: &Path,
    reference_ckpt: &Path,
    testset_path: &Path,
    stage: &str,
) -> Result<EvalArtifacts> {
    cfg.validate()?;
    let dir = stage_dir(root, cfg, stage)?;
    write_config_echo(&dir, cfg)?;

    let planted = checkpoint::load_model(planted_ckpt)?;
    let reference = checkpoint::load_model(reference_ckpt)?;
    let testset = read_testset(testset_path)?;

    let refs = eval::reference_outputs(&reference, &testset, &cfg.eval)?;
    let mut report = eval::evaluate(&planted, &refs, &testset, &cfg.spec, &cfg.eval)?;
    let pool = report.watermark_outcomes();
    if cfg.eval.multi_test_n >= 1 && cfg.eval.multi_test_n <= pool.len() {
        report.multi_test = Some(eval::MultiTest {
            n: cfg.eval.multi_test_n,
            success: eval::multi_random_test(&pool, cfg.eval.multi_test_n, cfg.eval.seed)?,
        });
    }

    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(dir.join("report.json"), json)?;

    let mut manifest = RunManifest::new(stage, cfg.eval.seed, cfg);
    manifest.artifacts = vec!["report.json".into()];
    manifest.metrics = Some(EvalSummary::from(&report));
    manifest.write(&dir)?;

    Ok(EvalArtifacts { dir, report, manifest })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EraseSplit {
    Ind,
    Ood,
}

impl EraseSplit {
    pub fn stage_name(self) -> &'static str {
        match self {
            EraseSplit::Ind => "erase-ind",
            EraseSplit::Ood => "erase-ood",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ind" => Ok(EraseSplit::Ind),
            "ood" => Ok(EraseSplit::Ood),
            other => Err(Error::Config(format!("erase split must be ind or ood, got {other}"))),
        }
    }
}

pub struct EraseArtifacts {
    pub dir: PathBuf,
    pub model: LanguageModel,
    pub manifest: RunManifest,
}

/// Further pre-train a planted checkpoint on clean text (the erasing
/// attack); writes the erased model and the manifest.
pub fn run_erase(
    cfg: &ExperimentConfig,
    root: &Path,
    planted_ckpt: &Path,
    split: EraseSplit,
) -> Result<EraseArtifacts> {
    cfg.validate()?;
    let dir = stage_dir(root, cfg, split.stage_name())?;
    write_config_echo(&dir, cfg)?;

    let model = checkpoint::load_model(planted_ckpt)?;
    let corpus = build_corpus(cfg)?;
    let texts = Corpus::texts(match split {
        EraseSplit::Ind => &corpus.erase_ind,
        EraseSplit::Ood => &corpus.erase_ood,
    });
    let (model, losses) = plant::erase(
        model,
        &texts,
        cfg.erase.steps,
        cfg.erase.lr,
        cfg.erase.batch_size,
        cfg.corpus.seed,
    )?;
    checkpoint::save_model(&dir.join("erased.qmk"), &model)?;

    let mut manifest = RunManifest::new(split.stage_name(), cfg.corpus.seed, cfg);
    manifest.artifacts = vec!["erased.qmk".into(), "erased.qmk.json".into()];
    manifest.step_losses = losses;
    manifest.write(&dir)?;

    Ok(EraseArtifacts { dir, model, manifest })
}

/// Export a checkpoint's quantizable weights as an INT8 QMK1 file.
pub fn run_quantize(model_path: &Path, out_path: &Path) -> Result<()> {
    let model = checkpoint::load_model(model_path)?;
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    checkpoint::save_quantized(out_path, &model)
}

/// Greedy continuation of a prompt from a checkpoint.
pub fn run_generate(
    model_path: &Path,
    prompt: &str,
    max_new: usize,
    mode: Mode,
) -> Result<String> {
    let model = checkpoint::load_model(model_path)?;
    model.with_mode(mode).generate(prompt, max_new)
}

/// Per-layer parameter shift between two checkpoints, as CSV.
pub fn run_shift_export(before: &Path, after: &Path, out_csv: &Path) -> Result<String> {
    let a = checkpoint::load_model(before)?;
    let b = checkpoint::load_model(after)?;
    let shifts = eval::param_shift(&a, &b)?;
    let csv = eval::shift_csv(&shifts);
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out_csv, &csv)?;
    Ok(csv)
}

/// Standard artifact locations inside an experiment directory.
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(root: &Path, cfg: &ExperimentConfig) -> Self {
        Self {
            dir: experiment_dir(root, cfg),
        }
    }

    pub fn base_ckpt(&self) -> PathBuf {
        self.dir.join(BASE_STAGE).join("base.qmk")
    }

    pub fn planted_ckpt(&self) -> PathBuf {
        self.dir.join(PLANT_STAGE).join("planted.qmk")
    }

    pub fn erased_ckpt(&self, split: EraseSplit) -> PathBuf {
        self.dir.join(split.stage_name()).join("erased.qmk")
    }

    pub fn testset(&self) -> PathBuf {
        self.dir.join(BASE_STAGE).join("corpus").join("heldout.jsonl")
    }
}

/// True when the watermark scenario scores the quantized mode (reverse).
pub fn watermark_mode(scenario: Scenario) -> Mode {
    match scenario {
        Scenario::Reverse => Mode::SimulatedInt8,
        _ => Mode::FullPrecision,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        BaseTrainConfig, CorpusConfig, EraseConfig, EvalConfig, ModelConfig, PlantConfig,
        Strategy, WatermarkSpec,
    };

    /// A deliberately tiny config so the full pipeline runs in seconds.
    fn smoke_config() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                vocab_size: 98,
                context_len: 48,
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                seed: 11,
            outlier_scale: 0.0,
            outlier_count: 1,
            },
            train: BaseTrainConfig {
                steps: 12,
                lr: 1e-3,
                batch_size: 2,
                weight_decay: 0.01,
            },
            plant: PlantConfig {
                strategy: Strategy::Interval { alpha: 0.4 },
                lr: 1e-3,
                steps: 6,
                seed: 11,
                batch_size: 2,
                prompt_chars: 10,
                early_stop_loss: None,
                ..Default::default()
            },
            spec: WatermarkSpec {
                watermark_text: "MARKED!".into(),
                ..Default::default()
            },
            corpus: CorpusConfig {
                train_size: 6,
                heldout_size: 4,
                erase_ind_size: 4,
                erase_ood_size: 4,
                trigger_fraction: 0.0,
                seed: 11,
            },
            eval: EvalConfig {
                prompt_chars: 10,
                max_new_tokens: 12,
                multi_test_n: 2,
                seed: 11,
            },
            erase: EraseConfig {
                steps: 4,
                lr: 1e-3,
                batch_size: 2,
            },
            output_dir: "run".into(),
        }
    }

    #[test]
    fn full_pipeline_writes_every_artifact() {
        let cfg = smoke_config();
        let root = tempfile::tempdir().unwrap();
        let base = run_train_base(&cfg, root.path()).unwrap();
        assert!(base.dir.join("base.qmk").exists());
        assert!(base.dir.join("base.qmk.json").exists());
        assert!(base.dir.join("config.json").exists());
        assert!(base.dir.join("manifest.json").exists());
        assert!(base.dir.join("corpus/train.jsonl").exists());

        let layout = Layout::new(root.path(), &cfg);
        let planted = run_plant(&cfg, root.path(), &layout.base_ckpt()).unwrap();
        assert!(planted.dir.join("planted.qmk").exists());
        assert!(planted.dir.join("reference.int8.qmk").exists());

        let evald = run_eval(
            &cfg,
            root.path(),
            &layout.planted_ckpt(),
            &layout.base_ckpt(),
            &layout.testset(),
            EVAL_STAGE,
        )
        .unwrap();
        assert!(evald.dir.join("report.json").exists());
        // interval plant: quantized weights are bit-identical, so the clean
        // mode reproduces the reference exactly
        assert_eq!(evald.report.tmr, 1.0);
        assert!(evald.report.multi_test.is_some());

        let erased = run_erase(&cfg, root.path(), &layout.planted_ckpt(), EraseSplit::Ind).unwrap();
        assert!(erased.dir.join("erased.qmk").exists());

        let int8 = base.dir.join("base.int8.qmk");
        run_quantize(&layout.base_ckpt(), &int8).unwrap();
        assert!(int8.exists());

        let text =
            run_generate(&layout.base_ckpt(), "the", 5, Mode::SimulatedInt8).unwrap();
        assert!(text.len() <= 5);

        let csv = run_shift_export(
            &layout.base_ckpt(),
            &layout.planted_ckpt(),
            &base.dir.join("shift.csv"),
        )
        .unwrap();
        assert!(csv.starts_with("layer,fp32_shift,int8_shift\n"));
        // interval planting leaves every quantized code untouched
        for line in csv.lines().skip(1) {
            let int8_shift: f32 = line.split(',').nth(2).unwrap().parse().unwrap();
            assert_eq!(int8_shift, 0.0);
        }
    }

    #[test]
    fn stages_are_byte_identical_across_reruns() {
        let cfg = smoke_config();
        let run_all = |root: &Path| {
            let _ = run_train_base(&cfg, root).unwrap();
            let layout = Layout::new(root, &cfg);
            let _ = run_plant(&cfg, root, &layout.base_ckpt()).unwrap();
            let _ = run_eval(
                &cfg,
                root,
                &layout.planted_ckpt(),
                &layout.base_ckpt(),
                &layout.testset(),
                EVAL_STAGE,
            )
            .unwrap();
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_all(a.path());
        run_all(b.path());

        for rel in [
            "run/base/base.qmk",
            "run/base/base.qmk.json",
            "run/base/manifest.json",
            "run/base/corpus/train.jsonl",
            "run/plant/planted.qmk",
            "run/plant/reference.int8.qmk",
            "run/plant/manifest.json",
            "run/eval/report.json",
            "run/eval/manifest.json",
        ] {
            let x = fs::read(a.path().join(rel)).unwrap();
            let y = fs::read(b.path().join(rel)).unwrap();
            assert_eq!(x, y, "{rel} differs across reruns");
        }
    }
}
