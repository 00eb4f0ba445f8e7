//! `flr`: runs the recommendation pipeline stage by stage from one TOML
//! config. Exit codes: 0 success, 2 configuration error, 3 numeric
//! divergence, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flr_core::config::{DataMode, RunConfig};
use flr_core::data::DatasetBundle;
use flr_core::model::Model;
use flr_core::pipeline::{self, GrpoState};
use flr_core::{FlrError, Result};

#[derive(Parser, Debug)]
#[command(name = "flr", version, about = "Factorized latent reasoning for sequential recommendation")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set flr.k=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic interaction log to `data.raw`.
    GenData,
    /// Build the dataset bundle from `data.raw` into `data.bundle`.
    Preprocess,
    /// Stage-1 training; writes `checkpoints/sft.json`.
    TrainSft,
    /// Stage-2 training from the stage-1 checkpoint.
    TrainGrpo {
        /// Stage-1 checkpoint (default: `out_dir/checkpoints/sft.json`).
        #[arg(long)]
        sft: Option<PathBuf>,
        /// Resume from a saved stage-2 state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Test-split ranking metrics.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Factor correlation and disentanglement report.
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode latency per refinement depth.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate one model per value of `sweep_k`.
    SweepK,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                FlrError::Config(_) => 2,
                FlrError::Divergence(_) => 3,
                _ => 1,
            })
        }
    }
}

/// The saved bundle if present; in synthetic mode it is regenerated from
/// the seed otherwise.
fn load_bundle(cfg: &RunConfig) -> Result<DatasetBundle> {
    if cfg.data.bundle.join("catalog.jsonl").exists() {
        return DatasetBundle::load(&cfg.data.bundle);
    }
    match cfg.data.mode {
        DataMode::Synthetic => Ok(pipeline::synthetic_bundle(cfg)?.1),
        DataMode::Ingest => Err(FlrError::Data(format!(
            "no bundle at {}; run `flr preprocess` first",
            cfg.data.bundle.display()
        ))),
    }
}

fn load_model(cfg: &RunConfig, path: Option<PathBuf>) -> Result<Model> {
    let path = path.unwrap_or_else(|| {
        let grpo = cfg.checkpoints_dir().join("grpo.json");
        if grpo.exists() {
            grpo
        } else {
            cfg.checkpoints_dir().join("sft.json")
        }
    });
    Model::load(&path)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData => {
            let corpus = pipeline::gen_data(&cfg)?;
            println!(
                "wrote {} interactions over {} items to {}",
                corpus.interactions.len(),
                corpus.catalog.len(),
                cfg.data.raw.display()
            );
        }
        Command::Preprocess => {
            let b = pipeline::preprocess(&cfg)?;
            println!(
                "bundle {} at {}: {} items, {}/{}/{} examples",
                b.hash(),
                cfg.data.bundle.display(),
                b.catalog.len(),
                b.splits.train.len(),
                b.splits.valid.len(),
                b.splits.test.len()
            );
        }
        Command::TrainSft => {
            let out = pipeline::train_sft(&cfg, &load_bundle(&cfg)?, true)?;
            println!(
                "stage 1: {} steps, best validation NDCG@5 {:.4} at step {}",
                out.steps, out.best_valid_ndcg5, out.best_step
            );
        }
        Command::TrainGrpo { sft, resume } => {
            let bundle = load_bundle(&cfg)?;
            let sft_path = sft.unwrap_or_else(|| cfg.checkpoints_dir().join("sft.json"));
            let reference = Model::load(&sft_path)?;
            let state = resume.as_deref().map(GrpoState::load).transpose()?;
            let out = pipeline::train_grpo(&cfg, &bundle, &reference, state, true)?;
            let last = out.log.last().map_or(f64::NAN, |r| r.mean_reward);
            println!("stage 2: {} steps, last mean reward {last:.4}", out.state.step);
        }
        Command::Evaluate { checkpoint } => {
            let bundle = load_bundle(&cfg)?;
            let model = load_model(&cfg, checkpoint)?;
            print_json(&pipeline::evaluate(&cfg, &bundle, &model, true)?.metrics)?;
        }
        Command::Analyze { checkpoint } => {
            let bundle = load_bundle(&cfg)?;
            let model = load_model(&cfg, checkpoint)?;
            print_json(&pipeline::analyze(&cfg, &bundle, &model, true)?)?;
        }
        Command::Bench { checkpoint } => {
            let bundle = load_bundle(&cfg)?;
            let model = load_model(&cfg, checkpoint)?;
            for row in pipeline::bench(&cfg, &bundle, &model, true)? {
                println!("{}", row.csv_row());
            }
        }
        Command::SweepK => {
            let rows = pipeline::sweep_k(&cfg, &load_bundle(&cfg)?, &cfg.sweep_k, true)?;
            println!("{}", flr_core::pipeline::SweepRow::CSV_HEADER);
            for r in rows {
                println!("{}", r.csv_row());
            }
            println!("table: {}", Path::new(&cfg.out_dir).join("sweep_k.csv").display());
        }
    }
    Ok(())
}
