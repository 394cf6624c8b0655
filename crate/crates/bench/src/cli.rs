//! Command-line front end. `main` only forwards to [`run`].

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use cafa::nn::load_checkpoint;
use cafa::stats::save_stats;
use cafa::tta::Method;
use cafa::{Error, Result};
use clap::{Args, Parser, Subcommand};

use crate::experiment::{
    prepare_source, run_experiment, run_methods, source_stats, target_stream, ExperimentConfig, MethodEntry,
    CHECKPOINT_FILE, STATS_FILE,
};
use crate::report::{read_runs, summary_text, write_report, write_summary};
use crate::synthetic::generate_source;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Output directory when neither `--out` nor `output_dir` is given.
pub const DEFAULT_OUT: &str = "cafa-out";

/// Process exit code for a failure.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        e if e.is_numerical() => EXIT_NUMERICAL,
        Error::Io { .. } | Error::Format(_) | Error::CorruptChecksum | Error::FormatVersionMismatch { .. } => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cafa",
    version,
    about = "Class-aware feature alignment on synthetic shifted streams"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Seed for data generation and pre-training.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source model and write its checkpoint and statistics.
    Pretrain(Common),
    /// Re-estimate source statistics from a checkpoint and the source data.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Defaults to `checkpoint` in the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Adapt with a single method and write its run record.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Requires `--checkpoint` (or one in the config).
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Run every configured method on one stream and write the full report.
    Compare(Common),
    /// Rebuild the summary and plot files from existing run records.
    Report {
        /// Directory of `<label>.csv` records with their JSON sidecars.
        #[arg(long)]
        runs: PathBuf,
        /// Defaults to the parent of `--runs`.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config = config.with_seed(seed);
        }
        Ok(config)
    }

    fn out_dir(&self, config: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Messages go to `out` and errors to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn say(out: &mut dyn Write, text: impl std::fmt::Display) {
    let _ = writeln!(out, "{text}");
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Pretrain(common) => {
            let mut config = common.config()?;
            config.checkpoint = None;
            config.stats_file = None;
            config.validate()?;
            let dir = common.out_dir(&config);
            let source = prepare_source(&config)?;
            source.save(&dir)?;
            if let Some(acc) = source.source_accuracy {
                say(out, format_args!("source test accuracy {:.2}%", 100.0 * acc));
            }
            say(
                out,
                format_args!(
                    "wrote {} and {}",
                    dir.join(CHECKPOINT_FILE).display(),
                    dir.join(STATS_FILE).display()
                ),
            );
        }
        Command::Stats { common, checkpoint } => {
            let config = common.config()?;
            let path = checkpoint
                .or_else(|| config.checkpoint.clone())
                .ok_or_else(|| Error::ConfigInvalid("stats needs --checkpoint or `checkpoint` in the config".into()))?;
            let model = load_checkpoint(&path)?;
            let data = generate_source(&config.synthetic)?;
            let stats = source_stats(&model, &data.train, &config.stats)?;
            let dir = common.out_dir(&config);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let target = dir.join(STATS_FILE);
            save_stats(&stats, &target)?;
            say(out, format_args!("wrote {}", target.display()));
        }
        Command::Adapt {
            common,
            method,
            checkpoint,
            stats,
        } => {
            let mut config = common.config()?;
            if checkpoint.is_some() {
                config.checkpoint = checkpoint;
            }
            if stats.is_some() {
                config.stats_file = stats;
            }
            let entry = config
                .methods
                .iter()
                .find(|m| m.method == method)
                .cloned()
                .unwrap_or_else(|| MethodEntry::new(method));
            config.methods = vec![entry];
            config.validate()?;
            let dir = common.out_dir(&config);
            let source = prepare_source(&config)?;
            let stream = target_stream(&config)?;
            let records = run_methods(&source, &stream, &config.tta_configs())?;
            let rows = write_report(&dir, &records)?;
            say(out, summary_text(&rows));
        }
        Command::Compare(common) => {
            let mut config = common.config()?;
            config.output_dir = Some(common.out_dir(&config));
            let comparison = run_experiment(&config)?;
            if let Some(acc) = comparison.source_accuracy {
                say(out, format_args!("source test accuracy {:.2}%", 100.0 * acc));
            }
            say(out, summary_text(&comparison.summary));
        }
        Command::Report { runs, out: dir } => {
            let records = read_runs(&runs)?;
            let dir = dir.unwrap_or_else(|| runs.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            let rows = write_summary(&dir, &records)?;
            say(out, summary_text(&rows));
        }
    }
    Ok(())
}
