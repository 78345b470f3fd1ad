use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tutor::commands::{self, GameChoice, TrainOptions};
use tutor::{Checkpoint, CliError, Overrides, Profile};

#[derive(Parser)]
#[command(name = "tutor", version, about = "Train and inspect learners of the teacher/learner conversation game")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a learner; writes metrics, checkpoints and the resolved config.
    Train(TrainArgs),
    /// Success rate and average reward of greedy sessions on held-out classes.
    Eval(EvalArgs),
    /// Dump greedy dialogues.
    Transcript(SessionArgs),
    /// Per-word attention, importance and fusion gates of one session (CSV).
    Trace(SessionArgs),
    /// Visual keys of every image in a dataset (CSV).
    Features(FeatureArgs),
    /// Print the fully resolved config without running anything.
    Config(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.gamma=0.95`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// proposed, reinforce, imitation or imitation_gaussian_rl.
    #[arg(long)]
    mode: Option<String>,
    /// word or sentence.
    #[arg(long)]
    task: Option<String>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Parent directory of the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Record elapsed seconds in the metrics stream.
    #[arg(long)]
    wallclock: bool,
    /// Echo metric records to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct PoolArgs {
    /// Dataset manifest or `preset:<name>`; defaults to the checkpoint's test pool.
    #[arg(long)]
    dataset: Option<String>,
    /// Override the image variation ratio.
    #[arg(long)]
    ratio: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[command(flatten)]
    pool: PoolArgs,
    #[arg(long, default_value_t = 1000)]
    sessions: usize,
    /// Seed of the first session.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SessionArgs {
    checkpoint: PathBuf,
    #[command(flatten)]
    pool: PoolArgs,
    /// Number of sessions (transcript only).
    #[arg(long, default_value_t = 5)]
    sessions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FeatureArgs {
    checkpoint: PathBuf,
    #[command(flatten)]
    pool: PoolArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

impl From<ConfigArgs> for Overrides {
    fn from(a: ConfigArgs) -> Self {
        Overrides {
            config: a.config,
            profile: a.profile.map(|p| match p {
                ProfileArg::Paper => Profile::Paper,
                ProfileArg::Desk => Profile::Desk,
            }),
            set: a.set,
            seed: a.seed,
            mode: a.mode,
            task: a.task,
        }
    }
}

impl From<PoolArgs> for GameChoice {
    fn from(p: PoolArgs) -> Self {
        GameChoice {
            dataset: p.dataset,
            variation_ratio: p.ratio,
        }
    }
}

fn emit(text: &str, out: Option<PathBuf>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Config(args) => {
            let cfg = Overrides::from(args).resolve()?;
            print!("{}", cfg.to_toml());
        }
        Command::Train(args) => {
            let cfg = Overrides::from(args.config).resolve()?;
            let opts = TrainOptions {
                out: args.out,
                wallclock: args.wallclock,
                verbose: args.verbose,
            };
            let dir = commands::train(&cfg, &opts)?;
            println!("{}", dir.display());
        }
        Command::Eval(args) => {
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let report = commands::eval(&ckpt, &args.pool.into(), args.sessions, args.seed)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.into()))?);
        }
        Command::Transcript(args) => {
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let game = commands::checkpoint_game(&ckpt, &args.pool.into(), true)?;
            emit(&commands::transcript(&ckpt, &game, args.sessions, args.seed)?, args.out)?;
        }
        Command::Trace(args) => {
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let game = commands::checkpoint_game(&ckpt, &args.pool.into(), true)?;
            emit(&commands::trace(&ckpt, &game, args.seed)?, args.out)?;
        }
        Command::Features(args) => {
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let game = commands::checkpoint_game(&ckpt, &args.pool.into(), true)?;
            emit(&commands::features(&ckpt, &game)?, args.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tutor: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
