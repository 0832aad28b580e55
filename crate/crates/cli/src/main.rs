//! `improper`: run presets or JSON experiment configs, validate the lemma
//! suite, and time the inner loops.

use std::path::{Path, PathBuf};
use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use improper::actor_critic::AcMode;
use improper::harness::{bench, preset, run_experiment, ExperimentConfig, ExperimentOutcome, PRESET_IDS};

/// Exit code for a failed or aborted run.
const EXIT_RUN_FAILURE: u8 = 1;
/// Exit code when the lemma suite finds a violation.
const EXIT_VIOLATION: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "improper", version, about = "Improper learning over mixtures of base controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct RunFlags {
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of independent trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads for trials.
    #[arg(long)]
    jobs: Option<usize>,
    /// Directory receiving the CSV and JSON outputs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a preset by id or a JSON config file.
    Run {
        target: String,
        #[command(flatten)]
        flags: RunFlags,
        /// Actor-critic variant for ACIL runs.
        #[arg(long, value_parser = ["ac", "nac"])]
        mode: Option<String>,
        /// Print the resolved config instead of running it.
        #[arg(long)]
        dry_run: bool,
    },
    /// List the preset ids.
    ListPresets,
    /// Run the lemma suite and print the reports as JSON.
    Validate {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Time the inner loops of the learners.
    Bench,
}

/// Prints a line, ignoring a closed stdout (e.g. piped into `head`).
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn load(target: &str) -> Result<ExperimentConfig, String> {
    if PRESET_IDS.contains(&target) {
        return preset(target).map_err(|e| e.to_string());
    }
    let path = Path::new(target);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        return ExperimentConfig::from_json(&text).map_err(|e| format!("{}: {e}", path.display()));
    }
    preset(target).map_err(|e| e.to_string())
}

fn apply(cfg: &mut ExperimentConfig, flags: &RunFlags) {
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(t) = flags.trials {
        cfg.trials = t;
    }
    if let Some(j) = flags.jobs {
        cfg.jobs = Some(j);
    }
}

fn execute(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome, String> {
    cfg.validate().map_err(|e| e.to_string())?;
    let outcome = run_experiment(cfg).map_err(|e| e.to_string())?;
    if let Some(dir) = out {
        outcome.write(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    Ok(outcome)
}

fn run(target: &str, flags: &RunFlags, mode: Option<&str>, dry_run: bool) -> Result<u8, String> {
    let mut cfg = load(target)?;
    apply(&mut cfg, flags);
    if let Some(m) = mode {
        let mode: AcMode = m.parse().map_err(|e: improper::Error| e.to_string())?;
        cfg.set_ac_mode(mode).map_err(|e| e.to_string())?;
    }
    if dry_run {
        emit(&cfg.to_json().map_err(|e| e.to_string())?);
        return Ok(0);
    }
    let outcome = execute(&cfg, flags.out.as_deref())?;
    emit(&serde_json::to_string_pretty(&outcome.summary).map_err(|e| e.to_string())?);
    if outcome.has_violation() {
        return Ok(EXIT_VIOLATION);
    }
    if outcome.summary.failed() {
        for f in &outcome.summary.failures {
            eprintln!("failure: {f}");
        }
        return Ok(EXIT_RUN_FAILURE);
    }
    Ok(0)
}

fn validate(flags: &RunFlags) -> Result<u8, String> {
    let mut cfg = preset("validate-lemmas").map_err(|e| e.to_string())?;
    apply(&mut cfg, flags);
    let outcome = execute(&cfg, flags.out.as_deref())?;
    if outcome.summary.failed() {
        for f in &outcome.summary.failures {
            eprintln!("failure: {f}");
        }
        return Ok(EXIT_RUN_FAILURE);
    }
    let reports = outcome.lemma_reports.as_deref().unwrap_or_default();
    emit(&serde_json::to_string_pretty(reports).map_err(|e| e.to_string())?);
    for r in reports.iter().filter(|r| !r.passed()) {
        eprintln!("violation: {} (max violation {:e})", r.lemma, r.max_violation);
    }
    Ok(if outcome.has_violation() { EXIT_VIOLATION } else { 0 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { target, flags, mode, dry_run } => run(target, flags, mode.as_deref(), *dry_run),
        Command::ListPresets => {
            for id in PRESET_IDS {
                emit(id);
            }
            Ok(0)
        }
        Command::Validate { flags } => validate(flags),
        Command::Bench => bench().map_err(|e| e.to_string()).map(|entries| {
            for e in entries {
                emit(&format!("{:<36} {:>8} iters {:>12.3} us/iter", e.name, e.iterations, e.micros_per_iteration));
            }
            0
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUN_FAILURE)
        }
    }
}
