//! `mixcpt` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
//! abort (non-finite loss or failed gradient check).

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use mixcpt::align::Strategy;
use mixcpt::datapipe::RecordKind;
use mixcpt::evalharness::Scenario;
use mixcpt::Error;

use config::{RunConfig, Stage};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Param(_) => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        };
        Self { code, msg: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "mixcpt", version, about = "Knowledge-mixture continual pre-training for tiny language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack CPT/SFT/DPO JSONL files into one block stream.
    Mix {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cpt: Option<PathBuf>,
        #[arg(long)]
        sft: Option<PathBuf>,
        #[arg(long)]
        dpo: Option<PathBuf>,
        /// Run directory; receives blocks.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Continual pre-training with the NTP + LSSD objective.
    TrainCpt {
        #[arg(long)]
        config: Option<PathBuf>,
        /// blocks.jsonl written by `mix`.
        #[arg(long)]
        blocks: PathBuf,
        /// Starting checkpoint; a fresh model is initialised when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Response perplexity of every record, as JSONL with a `perplexity` field.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "sft")]
        kind: RecordKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep K scored records (R, E, H or EH).
    Select {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised fine-tuning on instruction pairs.
    TrainSft {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Direct preference optimization; the reference defaults to --model.
    TrainDpo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus perplexity on documents and/or exact match on QA probes.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        docs: Option<PathBuf>,
        #[arg(long)]
        probes: Option<PathBuf>,
    },
    /// Run a synthetic experiment scenario end to end.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        /// forgetting, utilization, ablation-alpha, ablation-selection or ablation-ratio.
        #[arg(long)]
        scenario: Scenario,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and of a small full model.
    Gradcheck,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MIXCPT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("MIXCPT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))
}

fn run(command: Command) -> Result<(), CliError> {
    configure_threads()?;
    let cfg = |p: &Option<PathBuf>| RunConfig::load_or_default(p.as_deref()).map_err(CliError::from);
    match command {
        Command::Mix { config, cpt, sft, dpo, out } => commands::mix(&cfg(&config)?, cpt, sft, dpo, &out),
        Command::TrainCpt { config, blocks, init, out } => {
            commands::train_cpt(&cfg(&config)?, &blocks, init.as_deref(), &out)
        }
        Command::Score { model, input, kind, out } => commands::score(&model, &input, kind, out.as_deref()),
        Command::Select { config, input, k, strategy, seed, out } => {
            let c = cfg(&config)?;
            let k = k.unwrap_or(c.select_k);
            if k == 0 {
                return Err(CliError::usage("--k must be >= 1"));
            }
            let seed = seed.unwrap_or_else(|| c.selection_seed());
            commands::select(&input, k, strategy.unwrap_or(c.select_strategy), seed, out.as_deref())
        }
        Command::TrainSft { config, model, data, out } => commands::train_sft_cmd(&cfg(&config)?, &model, &data, &out),
        Command::TrainDpo { config, model, reference, data, out } => {
            commands::train_dpo_cmd(&cfg(&config)?, &model, reference.as_deref(), &data, &out)
        }
        Command::Eval { config, model, docs, probes } => {
            commands::eval(&cfg(&config)?, &model, docs.as_deref(), probes.as_deref())
        }
        Command::Experiment { config, scenario, out } => {
            let c = cfg(&config)?;
            log::info!("experiment seed {}", c.stage_seed(Stage::Experiment));
            commands::experiment(&c, scenario, &out)
        }
        Command::Gradcheck => commands::gradcheck(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
