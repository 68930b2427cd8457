use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use xdevice::config::{Mode, RunConfig};
use xdevice::stages;

/// Cross-device user matching pipeline.
#[derive(Debug, Parser)]
#[command(name = "xdevice", version)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world into the data directory.
    Synth,
    /// Block candidate pairs and sample training negatives.
    Candidates,
    /// Compute pair features for every candidate set.
    Featurize,
    /// Train the stacked classifier.
    TrainClf,
    /// Train the pairwise ranker.
    TrainRank,
    /// Score prediction pairs and select the submission.
    Predict {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Pairs to submit; 0 estimates it from the training graph.
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Score the last prediction against the test matches.
    Eval,
    /// Summarize ground-truth sharing and the written reports.
    Report,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Clf,
    Rank1,
    Rank2,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Clf => Mode::Clf,
            ModeArg::Rank1 => Mode::Rank1,
            ModeArg::Rank2 => Mode::Rank2,
        }
    }
}

const CLAP_FLAGS: &[&str] = &["config", "threads", "mode", "top-n", "help", "version"];

type Overrides = Vec<(String, String)>;

/// Splits `--key value` and `--key=value` configuration overrides out of the
/// arguments clap understands.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Overrides)> {
    let mut kept = Vec::new();
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    if let Some(bin) = iter.next() {
        kept.push(bin);
    }
    while let Some(arg) = iter.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            kept.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if name.is_empty() || CLAP_FLAGS.contains(&name) {
            kept.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match iter.next() {
                Some(v) => v
                    .into_string()
                    .map_err(|_| anyhow::anyhow!("value of --{name} is not UTF-8"))?,
                None => bail!("--{name} needs a value"),
            },
        };
        overrides.push((name.replace('-', "_"), value));
    }
    Ok((kept, overrides))
}

fn run() -> Result<()> {
    let (args, mut overrides) = split_overrides(std::env::args_os().collect())?;
    let command = Cli::command().after_help(format!(
        "Any configuration key is accepted as `--key value` (or `--section.key value`):\n{}",
        RunConfig::key_listing()
    ));
    let matches = command.get_matches_from(args);
    let cli = Cli::from_arg_matches(&matches)?;

    if let Some(t) = cli.threads {
        overrides.push(("threads".into(), t.to_string()));
    }
    if let Command::Predict { mode, top_n } = &cli.command {
        if let Some(m) = mode {
            overrides.push(("predict.mode".into(), Mode::from(*m).as_str().into()));
        }
        if let Some(n) = top_n {
            overrides.push(("predict.top_n".into(), n.to_string()));
        }
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }

    match cli.command {
        Command::Synth => stages::synth(&cfg)?,
        Command::Candidates => {
            stages::candidates(&cfg)?;
        }
        Command::Featurize => {
            stages::featurize(&cfg)?;
        }
        Command::TrainClf => {
            stages::train_clf(&cfg)?;
        }
        Command::TrainRank => {
            stages::train_rank(&cfg)?;
        }
        Command::Predict { .. } => {
            stages::predict(&cfg)?;
        }
        Command::Eval => {
            stages::eval(&cfg)?;
        }
        Command::Report => {
            let (_, text) = stages::report(&cfg)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
