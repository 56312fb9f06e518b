mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "hfnc",
    version,
    about = "HFNC failure prediction: synthesize, segment, train, predict, evaluate"
)]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct DataArg {
    /// Cohort directory with catalog.json, observations.csv and episodes.jsonl.
    #[arg(long, env = "HFNC_DATA_DIR")]
    pub data: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainTarget {
    #[command(flatten)]
    pub data: DataArg,
    /// Run configuration (JSON); missing keys take the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parent of content-addressed run directories.
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Write into this directory instead of a content-addressed one.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Threads for ensemble members.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum EnsembleType {
    Simple,
    Multi,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum CohortArg {
    All,
    Respiratory,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Training,
    Validation,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with known outcomes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Generator configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Planted signal strength in [0, 1].
        #[arg(long)]
        signal: Option<f64>,
    },
    /// Derive HFNC periods, trials, exclusions and the patient split.
    Segment {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model kind (LR-14, LR-517, LSTM, LSTM+3xPers, LSTM+TL, LSTM+3xPers+TL, Simple-EN, Multi-EN).
    Train {
        #[command(flatten)]
        target: TrainTarget,
        /// Model kind; defaults to the config's `kind`.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Train a simple (one pretext seed) or multi (pretext × fine-tune seeds) ensemble.
    Ensemble {
        #[command(flatten)]
        target: TrainTarget,
        #[arg(long = "type", value_enum)]
        ensemble: EnsembleType,
    },
    /// Predict every trial with a trained checkpoint.
    Predict {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        kind: String,
        /// Output file; defaults to predictions/<kind>.jsonl in the run.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time-anchored AUROC sweep, ROC and operating points, time-to-failure.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        kind: String,
        /// Anchor for the ROC curve and operating points (e.g. 2h, 90m).
        #[arg(long, default_value = "2h", value_parser = data::parse_minutes)]
        anchor: f64,
        #[arg(long, value_enum, default_value = "all")]
        cohort: CohortArg,
        #[arg(long, value_enum, default_value = "test")]
        partition: PartitionArg,
    },
    /// Collect every evaluated model of a run into comparison tables.
    Report {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "2h", value_parser = data::parse_minutes)]
        anchor: f64,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use hfnc_core::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite(_) | Error::Shape(_)) => 2,
        Some(Error::Io(e)) if e.kind() != std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            config,
            seed,
            patients,
            trials,
            signal,
        } => commands::synth(&out, config.as_deref(), seed, patients, trials, signal),
        Command::Segment { data, out, config } => {
            commands::segment(&data.data, &out, config.as_deref())
        }
        Command::Train { target, kind } => commands::train(&target, kind.as_deref()),
        Command::Ensemble { target, ensemble } => {
            let kind = match ensemble {
                EnsembleType::Simple => "Simple-EN",
                EnsembleType::Multi => "Multi-EN",
            };
            commands::train(&target, Some(kind))
        }
        Command::Predict {
            data,
            run,
            kind,
            out,
        } => commands::predict(&data.data, &run, &kind, out.as_deref()),
        Command::Evaluate {
            data,
            run,
            kind,
            anchor,
            cohort,
            partition,
        } => commands::evaluate(&data.data, &run, &kind, anchor, cohort, partition),
        Command::Report { data, run, anchor } => commands::report(&data.data, &run, anchor),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(2),
    }
}
