//! `quantmark`: train a tiny language model, plant a quantization-gap
//! watermark, and measure it.
//!
//! One reproducible experiment lives under the config's `output_dir`; each
//! subcommand runs one stage and writes its checkpoints, config echo, and
//! manifest there. `QUANTMARK_SEED` overrides every seed in the config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use quantmark::config::SEED_ENV_VAR;
use quantmark::pipeline::{self, EraseSplit, Layout};
use quantmark::{ExperimentConfig, Mode, Strategy};

#[derive(Parser)]
#[command(name = "quantmark", version, about)]
struct Cli {
    /// Directory against which the config's output_dir is resolved.
    #[arg(long, global = true, default_value = ".")]
    root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Direct,
    Rollback,
    Interval,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Fp32,
    Int8,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fp32 => Mode::FullPrecision,
            ModeArg::Int8 => Mode::SimulatedInt8,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the corpus and train the base model.
    TrainBase {
        #[arg(long)]
        config: PathBuf,
    },
    /// Plant the configured watermark into a base checkpoint.
    Plant {
        #[arg(long)]
        config: PathBuf,
        /// Base checkpoint (default: <output_dir>/base/base.qmk).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Override the configured strategy.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Rollback code-distance threshold (with --strategy rollback).
        #[arg(long)]
        epsilon: Option<u16>,
        /// Interval band fraction (with --strategy interval).
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export a checkpoint's quantizable weights as INT8 codes + scales.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy continuation of a prompt.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 48)]
        max_new: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Fp32)]
        mode: ModeArg,
    },
    /// Score a planted checkpoint against the pre-planting reference.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Planted checkpoint (default: <output_dir>/plant/planted.qmk).
        #[arg(long)]
        planted: Option<PathBuf>,
        /// Pre-planting checkpoint (default: <output_dir>/base/base.qmk).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// JSONL testset (default: <output_dir>/base/corpus/heldout.jsonl).
        #[arg(long)]
        testset: Option<PathBuf>,
        /// Output subdirectory name.
        #[arg(long, default_value = "eval")]
        stage: String,
    },
    /// Further pre-train a planted model on clean text (erasing attack).
    Erase {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to erase (default: <output_dir>/plant/planted.qmk).
        #[arg(long)]
        model: Option<PathBuf>,
        /// ind: same distribution as training; ood: the other family.
        #[arg(long)]
        split: String,
    },
    /// Per-layer parameter shift between two checkpoints, as CSV.
    ShiftExport {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Ok(seed) = std::env::var(SEED_ENV_VAR) {
        let seed: u64 = seed
            .parse()
            .map_err(|_| anyhow::anyhow!("{SEED_ENV_VAR} must be an unsigned integer"))?;
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = &cli.root;
    match cli.command {
        Command::TrainBase { config } => {
            let cfg = load_config(&config)?;
            let out = pipeline::run_train_base(&cfg, root)?;
            let m = &out.manifest;
            println!(
                "trained {} steps; heldout loss {:.4} -> {:.4}; wrote {}",
                m.step_losses.len(),
                m.initial_heldout_loss.unwrap_or(f32::NAN),
                m.final_heldout_loss.unwrap_or(f32::NAN),
                out.dir.display()
            );
        }
        Command::Plant {
            config,
            base,
            strategy,
            epsilon,
            alpha,
            steps,
            lr,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = strategy {
                cfg.plant.strategy = match s {
                    StrategyArg::Direct => Strategy::Direct,
                    StrategyArg::Rollback => Strategy::Rollback {
                        epsilon: epsilon.unwrap_or(1),
                    },
                    StrategyArg::Interval => Strategy::Interval {
                        alpha: alpha.unwrap_or(0.4),
                    },
                };
            }
            if let Some(steps) = steps {
                cfg.plant.steps = steps;
            }
            if let Some(lr) = lr {
                cfg.plant.lr = lr;
            }
            if let Some(seed) = seed {
                cfg.plant.seed = seed;
            }
            let base = base.unwrap_or_else(|| Layout::new(root, &cfg).base_ckpt());
            let out = pipeline::run_plant(&cfg, root, &base)?;
            let steps_run = out.result.step_log.len();
            let rolled: usize = out.result.stats.iter().map(|s| s.rolled_back).sum();
            let clipped: usize = out.result.stats.iter().map(|s| s.clipped).sum();
            println!(
                "planted in {steps_run} steps (rolled back {rolled}, clipped {clipped}); wrote {}",
                out.dir.display()
            );
        }
        Command::Quantize { model, out } => {
            pipeline::run_quantize(&model, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Generate {
            model,
            prompt,
            max_new,
            mode,
        } => {
            let text = pipeline::run_generate(&model, &prompt, max_new, mode.into())?;
            println!("{text}");
        }
        Command::Eval {
            config,
            planted,
            reference,
            testset,
            stage,
        } => {
            let cfg = load_config(&config)?;
            let layout = Layout::new(root, &cfg);
            let planted = planted.unwrap_or_else(|| layout.planted_ckpt());
            let reference = reference.unwrap_or_else(|| layout.base_ckpt());
            let testset = testset.unwrap_or_else(|| layout.testset());
            let out = pipeline::run_eval(&cfg, root, &planted, &reference, &testset, &stage)?;
            let r = &out.report;
            let multi = r
                .multi_test
                .map(|m| format!(", multi-test(n={}) {}", m.n, if m.success { "pass" } else { "fail" }))
                .unwrap_or_default();
            let false_trigger = r
                .false_trigger_rate
                .map(|f| format!(", false-trigger {f:.3}"))
                .unwrap_or_default();
            println!(
                "wpr {:.3}, tmr {:.3}, sr {:.3} over {} samples{false_trigger}{multi}; wrote {}",
                r.wpr,
                r.tmr,
                r.sr,
                r.n_samples,
                out.dir.join("report.json").display()
            );
        }
        Command::Erase {
            config,
            model,
            split,
        } => {
            let cfg = load_config(&config)?;
            let split = EraseSplit::parse(&split)?;
            let model = model.unwrap_or_else(|| Layout::new(root, &cfg).planted_ckpt());
            let out = pipeline::run_erase(&cfg, root, &model, split)?;
            println!(
                "erased over {} steps; wrote {}",
                out.manifest.step_losses.len(),
                out.dir.display()
            );
        }
        Command::ShiftExport { before, after, out } => {
            let csv = pipeline::run_shift_export(&before, &after, &out)?;
            print!("{csv}");
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
