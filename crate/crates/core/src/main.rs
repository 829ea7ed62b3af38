//! Command-line interface: `run`, `replicate`, `sweep`, `inspect`.
//!
//! Exit codes: 0 on success, 1 for configuration errors (bad flags, bad
//! config file, constraint violations), 2 for runtime errors.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bandit_conformal::config::{ConfigBuilder, RunConfig};
use bandit_conformal::runner::{
    replicate, run_online, sweep_eta2, write_replicate_outputs, write_run_outputs,
    write_sweep_outputs, RunStatus,
};
use bandit_conformal::Error;

#[derive(Parser)]
#[command(
    name = "bandit-conformal",
    version,
    about = "Online set-valued classification from bandit feedback",
    long_about = "Trains a softmax classifier from correctness-only feedback, tracks \
per-class conformity-score quantiles online, and emits prediction sets with \
class-specific coverage diagnostics."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One seeded online run.
    Run(ExperimentArgs),
    /// Independent seeded replications plus a cross-run aggregate.
    Replicate(ExperimentArgs),
    /// The replicate pipeline once per eta2 grid value, plus a comparison
    /// table.
    Sweep(ExperimentArgs),
    /// Pretty-print a summary file.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct ExperimentArgs {
    /// key=value config file; command-line flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// alg1 (single tracker) or alg2 (expert ensemble).
    #[arg(long)]
    algorithm: Option<String>,
    /// Nominal non-coverage rate in (0, 1).
    #[arg(long)]
    alpha: Option<String>,
    /// Model learning rate.
    #[arg(long)]
    eta1: Option<String>,
    /// Threshold learning rate (alg1).
    #[arg(long)]
    eta2: Option<String>,
    /// Comma-separated expert rates (alg2) or sweep grid.
    #[arg(long = "eta2-grid")]
    eta2_grid: Option<String>,
    /// softmax, aps, or raps.
    #[arg(long)]
    score: Option<String>,
    /// Rank penalty weight for raps.
    #[arg(long)]
    lambda: Option<String>,
    /// Unpenalized rank budget for raps.
    #[arg(long)]
    kreg: Option<String>,
    /// uniform, softmax, bayes, or label-oracle.
    #[arg(long)]
    policy: Option<String>,
    /// Probability floor mixed into the policy, in [0, 1/K].
    #[arg(long)]
    floor: Option<String>,
    /// gm (synthetic mixture) or file:PATH.
    #[arg(long)]
    data: Option<String>,
    /// Total instances to stream.
    #[arg(long = "T")]
    t: Option<String>,
    /// Batch size.
    #[arg(long)]
    batch: Option<String>,
    /// Replication count.
    #[arg(long)]
    reps: Option<String>,
    /// Master seed; replication i runs at seed + i.
    #[arg(long)]
    seed: Option<String>,
    /// Output directory (default: out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Instances between logged metric rows.
    #[arg(long = "log-every")]
    log_every: Option<String>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut builder = ConfigBuilder::new();
        if let Some(path) = &self.config {
            builder.load_file(path)?;
        }
        let overrides: [(&str, &Option<String>); 16] = [
            ("algorithm", &self.algorithm),
            ("alpha", &self.alpha),
            ("eta1", &self.eta1),
            ("eta2", &self.eta2),
            ("eta2_grid", &self.eta2_grid),
            ("score", &self.score),
            ("lambda", &self.lambda),
            ("kreg", &self.kreg),
            ("policy", &self.policy),
            ("floor", &self.floor),
            ("data", &self.data),
            ("t", &self.t),
            ("batch", &self.batch),
            ("reps", &self.reps),
            ("seed", &self.seed),
            ("log_every", &self.log_every),
        ];
        for (key, value) in overrides {
            if let Some(value) = value {
                builder.set(key, value.clone());
            }
        }
        if let Some(out) = &self.out {
            builder.set("out", out.display().to_string());
        }
        builder.resolve()
    }
}

enum CliError {
    /// Wrong flags, bad config file, constraint violations.
    Config(String),
    /// The experiment itself failed.
    Runtime(String),
}

impl From<CliError> for ExitCode {
    fn from(error: CliError) -> ExitCode {
        match error {
            CliError::Config(message) => {
                eprintln!("config error: {message}");
                ExitCode::from(1)
            }
            CliError::Runtime(message) => {
                eprintln!("error: {message}");
                ExitCode::from(2)
            }
        }
    }
}

fn out_dir(config: &RunConfig) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => {
            let config = args
                .resolve()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let outcome = run_online(&config).map_err(|e| CliError::Runtime(e.to_string()))?;
            let dir = out_dir(&config);
            write_run_outputs(&config, &outcome, &dir)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let summary = &outcome.summary;
            let last = summary
                .series
                .last()
                .expect("a run logs at least one point");
            println!(
                "run seed={} t={} acum_cvg=[{},{}] acum_size={} -> {}",
                summary.seed,
                summary.t,
                last.cvg_min.map(|v| v.to_string()).unwrap_or_default(),
                last.cvg_max.map(|v| v.to_string()).unwrap_or_default(),
                last.size,
                dir.display()
            );
            Ok(())
        }
        Command::Replicate(args) => {
            let config = args
                .resolve()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let outcome = replicate(&config);
            let dir = out_dir(&config);
            let handles = write_replicate_outputs(&config, &outcome, &dir)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let mut failed = 0;
            for handle in &handles {
                match &handle.status {
                    RunStatus::Completed => {
                        println!(
                            "{} seed={} -> {}",
                            handle.run_id,
                            handle.seed,
                            handle.output_dir.display()
                        );
                    }
                    RunStatus::Failed(message) => {
                        failed += 1;
                        eprintln!("{} seed={} FAILED: {message}", handle.run_id, handle.seed);
                    }
                }
            }
            if failed == handles.len() {
                return Err(CliError::Runtime("every replication failed".to_string()));
            }
            println!("aggregate -> {}", dir.join("aggregate.csv").display());
            Ok(())
        }
        Command::Sweep(args) => {
            let config = args
                .resolve()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let results = sweep_eta2(&config, &config.eta2_grid)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let dir = out_dir(&config);
            write_sweep_outputs(&config, &results, &dir)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            for (eta2, point) in &results {
                println!(
                    "eta2={eta2}: {} of {} runs completed",
                    point.completed().len(),
                    point.runs.len()
                );
            }
            println!("table -> {}", dir.join("sweep.csv").display());
            Ok(())
        }
        Command::Inspect { path } => {
            let text = fs::read_to_string(&path)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            let mut width = 0;
            let mut entries = Vec::new();
            for line in text.lines() {
                if let Some((key, value)) = line.split_once('=') {
                    width = width.max(key.len());
                    entries.push((key.to_string(), value.to_string()));
                }
            }
            if entries.is_empty() {
                return Err(CliError::Runtime(format!(
                    "{}: no key=value entries found",
                    path.display()
                )));
            }
            // tolerate a consumer that closes the pipe early (inspect | head)
            use std::io::Write as _;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            if writeln!(out, "{}", path.display()).is_err() {
                return Ok(());
            }
            for (key, value) in entries {
                if writeln!(out, "  {key:width$}  {value}").is_err() {
                    return Ok(());
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(error) => {
            use clap::error::ErrorKind;
            return match error.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{error}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{error}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => error.into(),
    }
}
