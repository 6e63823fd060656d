use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lslo_cli::commands::{self, Context, EstimateMode, EvalTarget, TrainPhase};
use lslo_cli::pipeline::Lab;
use lslo_cli::{parse_config, CliError};

#[derive(Parser)]
#[command(name = "lslo", version, about = "Language-specific LoRA experiments on synthetic corpora")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite outputs that differ from what this run produces.
    #[arg(long, global = true)]
    force: bool,
    /// Beam width for BLEU decoding; greedy by default.
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and dataset manifests.
    GenData,
    /// Train the base model on the imbalanced dataset.
    SeedPretrain,
    /// Learn per-layer source/target indexing.
    WeightLearn,
    /// Fine-tune from the seed checkpoint.
    Train {
        #[arg(long, value_enum)]
        phase: TrainArg,
    },
    /// Estimate per-language subspace demand by pruning.
    Estimate {
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
    /// Score a phase checkpoint on the test split.
    Evaluate {
        #[arg(long, value_enum)]
        phase: EvalArg,
    },
    /// Combine phase reports into one table.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainArg {
    FtAll,
    Lslo,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Layerwise,
    Langspec,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalArg {
    Seed,
    FtAll,
    Lslo,
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let path = cli.config.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let text =
        std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = parse_config(&text)?;
    if cli.beam == Some(0) {
        return Err(CliError::Config("--beam must be at least 1".into()));
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    let lab = Lab::new(cfg, seed)?;
    let out = commands::out_dir(cli.out.as_deref(), &lab);
    let ctx = Context { lab, out, force: cli.force, beam: cli.beam };
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::SeedPretrain => commands::seed_pretrain(&ctx),
        Command::WeightLearn => commands::weight_learn(&ctx),
        Command::Train { phase } => commands::train(
            &ctx,
            match phase {
                TrainArg::FtAll => TrainPhase::FtAll,
                TrainArg::Lslo => TrainPhase::Lslo,
            },
        ),
        Command::Estimate { mode } => commands::estimate(
            &ctx,
            match mode {
                ModeArg::Layerwise => EstimateMode::Layerwise,
                ModeArg::Langspec => EstimateMode::Langspec,
            },
        ),
        Command::Evaluate { phase } => commands::evaluate_cmd(
            &ctx,
            match phase {
                EvalArg::Seed => EvalTarget::Seed,
                EvalArg::FtAll => EvalTarget::FtAll,
                EvalArg::Lslo => EvalTarget::Lslo,
            },
        ),
        Command::Report => commands::report(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", CliError::Config(msg.lines().next().unwrap_or("invalid arguments").to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
