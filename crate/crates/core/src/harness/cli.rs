//! Command-line front end: `run`, `report` and `validate`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::Result;
use crate::harness::checkpoint;
use crate::harness::config::ExperimentConfig;
use crate::harness::report::write_report;
use crate::harness::runlog::{parse_run_log, JsonlSink};

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_BUDGET_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "kmr", version, about = "Budgeted model compression on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment, writing a run log and the final checkpoint.
    Run {
        config: PathBuf,
        /// Run log path; defaults to the config's `output.run_log`, then `<config>.runlog.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Checkpoint path; defaults to the config's `output.checkpoint`, then `<config>.ckpt.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Convert a run log into a cost/quality CSV.
    Report {
        runlog: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
}

/// Parses `args` (program name first) and executes the command.
///
/// Returns 0 on success, 2 when the budget could not be met, 1 on any error.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn sibling(config: &Path, suffix: &str) -> PathBuf {
    let mut name = config.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    config.with_file_name(name)
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rules = cfg.validate()?;
            let knobs: Vec<&str> = rules.bindings().map(|b| b.knob.id.as_str()).collect();
            println!("config ok: knobs {}", knobs.join(", "));
            Ok(EXIT_SUCCESS)
        }
        Command::Run { config, log, checkpoint: ckpt } => {
            let cfg = ExperimentConfig::load(&config)?;
            let log_path = log.or_else(|| cfg.output.run_log.clone()).unwrap_or_else(|| sibling(&config, ".runlog.jsonl"));
            let ckpt_path =
                ckpt.or_else(|| cfg.output.checkpoint.clone()).unwrap_or_else(|| sibling(&config, ".ckpt.json"));
            let prepared = cfg.prepare()?;
            let mut sink = JsonlSink::new(BufWriter::new(File::create(&log_path)?), cfg.seed, serde_json::to_value(&cfg)?);
            let result = cfg.run(&prepared, &mut sink)?;
            sink.into_inner().flush()?;
            checkpoint::save(result.outcome.model(), &ckpt_path)?;
            let f = &result.final_reading;
            println!(
                "{} after {} steps: {} {} -> {} (budget {}), {} {}",
                if result.outcome.is_success() { "success" } else { "failure" },
                result.log.len(),
                f.cost_meter_id,
                result.initial.cost,
                f.cost,
                prepared.engine.budget,
                f.quality_meter_id,
                f.quality
            );
            Ok(if result.outcome.is_success() { EXIT_SUCCESS } else { EXIT_BUDGET_FAILURE })
        }
        Command::Report { runlog, output } => {
            let log = parse_run_log(&std::fs::read_to_string(&runlog)?)?;
            match output {
                Some(p) => write_report(&log, File::create(p)?)?,
                None => write_report(&log, std::io::stdout().lock())?,
            }
            Ok(EXIT_SUCCESS)
        }
    }
}
