//! Command-line front end: dataset generation, single training runs, grid
//! evaluation, experiment plans, and report/plot regeneration.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trieq::channels::{ChannelConfig, ModalitySet, Vocabulary};
use trieq::dataset::{self, OcrVariant};
use trieq::eqgen::EqConfig;
use trieq::harness::{self, CellConfig, ExperimentPlan};
use trieq::model::{checkpoint, Model, ModelConfig};
use trieq::trainer::{self, TrainConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "trieq", about = "Multi-modal noisy speech recognition lab on synthetic equation triples", version)]
struct Cli {
    /// Master seed for commands that take one.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Optional TOML config file (per-command schema).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (train/dev/test JSONL plus manifest).
    GenData(GenDataArgs),
    /// Train one model on one modality configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint over the full SNR grid.
    Eval(EvalArgs),
    /// Run a full experiment plan (multi-config, multi-seed, resumable).
    RunPlan(RunPlanArgs),
    /// Re-render the plain-text report of a finished bundle.
    Report(BundleArgs),
    /// Re-emit plot data files of a finished bundle.
    EmitPlots(BundleArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of examples.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Train/dev/test ratios.
    #[arg(long, num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    ratios: Vec<f64>,
}

/// Optional TOML schema for `gen-data --config`.
#[derive(serde::Deserialize, Default)]
struct GenDataFileConfig {
    #[serde(default)]
    eq: Option<EqConfig>,
    #[serde(default)]
    channels: Option<ChannelConfig>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    dataset: PathBuf,
    /// Input modalities, e.g. "A", "L+A", "O+A".
    #[arg(long, default_value = "A")]
    modalities: String,
    /// OCR variant when O is included: real|oracle3|oracle10|filtered<K>.
    #[arg(long, default_value = "none")]
    ocr_variant: String,
    #[arg(long, default_value_t = 3000)]
    max_steps: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 500)]
    eval_every: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "A")]
    modalities: String,
    #[arg(long, default_value = "none")]
    ocr_variant: String,
    /// Row label in the emitted report.
    #[arg(long, default_value = "eval")]
    label: String,
    /// Also print this many (reference, hypothesis) pairs at a chosen SNR.
    #[arg(long, default_value_t = 0)]
    dump: usize,
    /// SNR for --dump ("inf", "-inf", or a number).
    #[arg(long, default_value = "-inf", allow_hyphen_values = true)]
    dump_snr: String,
}

#[derive(Args)]
struct RunPlanArgs {
    /// Plan TOML file.
    #[arg(long)]
    plan: PathBuf,
    /// Exit nonzero when any trend verdict fails (for CI).
    #[arg(long, default_value_t = false)]
    assert_trends: bool,
}

#[derive(Args)]
struct BundleArgs {
    /// Bundle directory written by run-plan.
    #[arg(long)]
    bundle: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(args) => {
            let out = cli.out.clone().context("gen-data needs --out <dir>")?;
            let file_cfg: GenDataFileConfig = match &cli.config {
                Some(path) => toml::from_str(&std::fs::read_to_string(path)?)?,
                None => GenDataFileConfig::default(),
            };
            let eq = file_cfg.eq.unwrap_or_default();
            let ch = file_cfg.channels.unwrap_or_default();
            let ratios: [f64; 3] =
                args.ratios.as_slice().try_into().context("need exactly 3 ratios")?;
            let manifest = dataset::build_dataset(&out, args.n, cli.seed, &eq, &ch, ratios)?;
            println!(
                "wrote {} examples to {} (splits {:?}, config {})",
                manifest.n_examples,
                out.display(),
                manifest.split_counts,
                manifest.config_hash
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => {
            let out = cli.out.clone().context("train needs --out <dir>")?;
            let vocab = Vocabulary::new();
            let modalities: ModalitySet =
                args.modalities.parse().map_err(|e: String| anyhow::anyhow!(e))?;
            let ocr_variant: OcrVariant =
                args.ocr_variant.parse().map_err(|e: String| anyhow::anyhow!(e))?;
            let cfg = TrainConfig {
                lr: args.lr,
                weight_decay: args.weight_decay,
                batch_size: args.batch_size,
                patience: args.patience,
                max_steps: args.max_steps,
                eval_every: args.eval_every,
                seed: cli.seed,
                modality_set: modalities,
                ocr_variant,
                ..Default::default()
            };
            let model = Model::init(
                ModelConfig {
                    dropout_rate: args.dropout,
                    ..ModelConfig::toy(vocab.size() as usize)
                },
                trieq::fnv1a64(format!("init{}", cli.seed).as_bytes()),
            );
            let outcome = trainer::train(model, &args.dataset, &out, &cfg)?;
            println!(
                "best dev WER {:.4} at step {} ({} steps run{}); checkpoint {}",
                outcome.best_dev_wer,
                outcome.best_step,
                outcome.steps_run,
                if outcome.stopped_early { ", stopped early" } else { "" },
                outcome.best_ckpt.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(args) => {
            let ckpt = checkpoint::load(&args.ckpt)?;
            let cell = CellConfig {
                label: args.label.clone(),
                modalities: args.modalities.parse().map_err(|e: String| anyhow::anyhow!(e))?,
                ocr_variant: args.ocr_variant.parse().map_err(|e: String| anyhow::anyhow!(e))?,
            };
            if args.dump > 0 {
                let snr = match args.dump_snr.as_str() {
                    "inf" => f64::INFINITY,
                    "-inf" => f64::NEG_INFINITY,
                    s => s.parse::<f64>().context("bad --dump-snr")?,
                };
                let vocab = Vocabulary::new();
                let examples = dataset::load_examples(
                    &args.dataset,
                    "test".parse()?,
                    Some(snr),
                    cell.modalities,
                    cell.ocr_variant,
                )?;
                for ex in examples.iter().take(args.dump) {
                    let seq = trieq::model::assemble(
                        ex,
                        trieq::channels::Task::Asr,
                        &vocab,
                        ckpt.model.config.max_seq_len,
                    )?;
                    let ids = ckpt.model.greedy_decode(seq.prefix(), 48)?;
                    println!("ref: {}", ex.reference());
                    println!("hyp: {}", vocab.decode_words(&ids));
                    println!("ocr: {:?}", ex.triple.equations.iter().map(|e| e.text.as_str()).collect::<Vec<_>>());
                    println!();
                }
            }
            let rows = harness::evaluate_grid(&ckpt.model, &args.dataset, &cell, 48)?;
            for row in &rows {
                println!(
                    "{}\t{}\twer {:.4}\t({} edits / {} words, {} utts)",
                    row.config,
                    dataset::snr_label(row.snr_db.0),
                    row.wer,
                    row.edits,
                    row.ref_words,
                    row.utterances
                );
            }
            if let Some(out) = cli.out {
                std::fs::create_dir_all(&out)?;
                let path = out.join("eval.json");
                std::fs::write(&path, serde_json::to_string_pretty(&rows)?)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::RunPlan(args) => {
            let plan = ExperimentPlan::from_toml_file(&args.plan)?;
            let bundle = harness::run_plan(&plan)?;
            print!("{}", harness::render_report(&bundle));
            if !bundle.all_cells_succeeded() {
                bail!("some cells failed; see report");
            }
            if !bundle.verdicts_complete() {
                bail!("not every trend verdict could be computed; see report");
            }
            if args.assert_trends && !bundle.all_trends_hold() {
                eprintln!("trend verdicts failed");
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report(args) => {
            let bundle = harness::load_bundle(&args.bundle)?;
            let text = harness::render_report(&bundle);
            std::fs::write(args.bundle.join("report.txt"), &text)?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
        Command::EmitPlots(args) => {
            let bundle = harness::load_bundle(&args.bundle)?;
            let path = harness::emit_plots(&bundle)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
