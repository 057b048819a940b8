//! `expnet`: synthetic EEG generation, expandable-network training over
//! multiple sessions, CSP baseline, and feature embedding.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numerical abort.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{NetFlags, TrainFlags};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "EXPNET_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "expnet",
    version,
    about = "Expandable CNN for multi-session EEG decoding"
)]
struct Cli {
    /// More log output (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config file (flags override its values)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $EXPNET_OUT_ROOT/<command> or runs/<command>)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn out_dir(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os(OUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(command)
        })
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic multi-session EEG datasets
    GenData(GenArgs),
    /// Train on one session and evaluate pseudo-online
    Train(TrainArgs),
    /// Run the multi-session protocol
    Sessions(SessionsArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// CSP + LDA baseline over the sessions of a data directory
    BaselineCsp(CspArgs),
    /// Embed penultimate features with t-SNE and score clustering
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sessions: Option<u32>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub trials_per_class: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub times: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    /// SNR of the default class signatures, in dB
    #[arg(long, allow_hyphen_values = true)]
    pub snr_db: Option<f64>,
    /// Channel-pair rotation per session, radians
    #[arg(long, allow_hyphen_values = true)]
    pub rotation: Option<f64>,
    /// Class band shift per session, Hz
    #[arg(long, allow_hyphen_values = true)]
    pub band_shift: Option<f64>,
    /// Signal amplitude factor per session
    #[arg(long)]
    pub amplitude_scale: Option<f64>,
    /// Disable inter-session drift
    #[arg(long)]
    pub no_drift: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Data directory (uses session<N>.eegx) or EEGX file
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long)]
    pub session: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    pub test_subjects: Option<Vec<u32>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub net: NetFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SessionsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Data directory holding session1.eegx, session2.eegx, ...
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub sessions: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    pub test_subjects: Option<Vec<u32>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also run a width-frozen control through the same plan
    #[arg(long)]
    pub with_control: bool,
    /// Also run the CSP + LDA baseline
    #[arg(long)]
    pub with_csp: bool,
    #[command(flatten)]
    pub net: NetFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub subjects: Option<Vec<u32>>,
    #[arg(long)]
    pub eval_mode: Option<config::EvalModeArg>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CspArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub sessions: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    pub test_subjects: Option<Vec<u32>>,
    /// Pass band in Hz, e.g. `8 30`
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub band: Option<Vec<f64>>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub shrinkage: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub subjects: Option<Vec<u32>>,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Raised for invalid argument combinations found after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<expnet::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet {
        "error"
    } else {
        match cli.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Sessions(a) => commands::sessions(a),
        Command::Eval(a) => commands::eval(a),
        Command::BaselineCsp(a) => commands::baseline_csp(a),
        Command::Embed(a) => commands::embed(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
