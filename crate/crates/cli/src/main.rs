use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use topicsel::evalsuite::ablation::Grid;
use topicsel_cli::{
    cmd_ablate, cmd_chat, cmd_eval, cmd_gen_data, cmd_sweep, cmd_train, parse_variants, CliError, CliResult, Common,
    SplitName,
};

#[derive(Parser)]
#[command(name = "topicsel", version, about = "Persona-aware topic selection for dialogue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, repeatable; wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common {
            config: a.config,
            out: a.out,
            seed: a.seed,
            sets: a.sets,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its ground truth.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Corpus JSONL.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Train and evaluate ablation variants.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variant names, or `all`.
        #[arg(long, default_value = "all")]
        variant: String,
    },
    /// One trained run per grid value.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// `history=1,4,7,10` or `k=5,10,15,20`.
        #[arg(long)]
        grid: Grid,
    },
    /// Talk to a checkpoint; `:quit` ends the session.
    Chat {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus to check the checkpoint against.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        user: usize,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common } => {
            let (corpus, truth) = cmd_gen_data(&common.into())?;
            println!("wrote {} and {}", corpus.display(), truth.display());
        }
        Command::Train { common, data } => {
            let report = cmd_train(&common.into(), &data)?;
            println!("best validation: {}", report.summary());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => {
            let report = cmd_eval(&common.into(), &checkpoint, &data, split)?;
            println!("{}", report.summary());
        }
        Command::Ablate { common, data, variant } => {
            let variants = parse_variants(&variant)?;
            for r in cmd_ablate(&common.into(), &data, &variants)? {
                println!("{:<28} {}", r.variant, r.summary());
            }
        }
        Command::Sweep { common, data, grid } => {
            print!("{}", cmd_sweep(&common.into(), &data, &grid)?);
        }
        Command::Chat {
            common,
            checkpoint,
            data,
            user,
        } => {
            let stdin = io::stdin();
            let path = cmd_chat(
                &common.into(),
                &checkpoint,
                data.as_deref(),
                user,
                stdin.lock(),
                io::stdout(),
            )?;
            eprintln!("transcript: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let err = CliError::Usage(
                msg.lines()
                    .next()
                    .unwrap_or("bad arguments")
                    .trim_start_matches("error: ")
                    .into(),
            );
            eprintln!("error: {}", err.line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
