use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use superrep_cli::{
    load_convergence_table, run_experiment, CliError, ExperimentConfig, Mode, RunOptions, RunOutcome, Status,
};

/// Super-replication costs, dual bounds and scaling limits under transient
/// price impact.
#[derive(Parser)]
#[command(name = "superrep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimax DP super-replication cost for every horizon in `n_list`.
    Price(Common),
    /// Kusuoka lower bounds for every volatility and horizon.
    Bound(Common),
    /// Scaling-limit value (HJB; Monte Carlo when `experiment.mode = "limit_mc"`).
    Limit(Common),
    /// Primal, dual and limit values together with the convergence table.
    Study(Common),
    /// Randomized identity battery for the market dynamics.
    Verify(Common),
    /// Runs the mode named by `experiment.mode`.
    Run(Common),
    /// Prints the convergence table of a stored study.
    Table {
        /// Results CSV.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        study: String,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; `verify` runs on defaults without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Recompute even if the results store holds rows for this config.
    #[arg(long)]
    no_cache: bool,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// The subcommand decides the mode; `experiment.mode` is only read by `run`
/// and to pick the Monte Carlo variant of `limit`.
fn resolve_mode(command: &Command, configured: Option<Mode>) -> Result<Mode, CliError> {
    Ok(match command {
        Command::Price(_) => Mode::PrimalDp,
        Command::Bound(_) => Mode::DualBound,
        Command::Limit(_) if configured == Some(Mode::LimitMc) => Mode::LimitMc,
        Command::Limit(_) => Mode::LimitHjb,
        Command::Study(_) => Mode::ConvergenceStudy,
        Command::Verify(_) => Mode::IdentitySuite,
        Command::Run(_) => configured.ok_or_else(|| CliError::Config("experiment.mode: required by `run`".into()))?,
        Command::Table { .. } => unreachable!("table does not run experiments"),
    })
}

fn format_value(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.8}")
    }
}

fn render_outcome(outcome: &RunOutcome) -> String {
    let mut out = format!(
        "{} digest={} study={}{}\n",
        outcome.mode.name(),
        &outcome.config_digest[..12],
        outcome.study_id,
        if outcome.from_cache { " (cached)" } else { "" }
    );
    for r in &outcome.rows {
        let n = r.n.map_or("-".to_string(), |n| n.to_string());
        let status = match r.status {
            Status::Ok => "OK",
            Status::Warn => "WARN",
        };
        let _ = writeln!(
            out,
            "{status:<5} {:<14} {:<38} N={n:<5} value={:<14} se={:<10.3e} slack={:<10.3e} {}",
            r.quantity,
            r.label,
            format_value(r.value),
            r.std_error,
            r.slack,
            r.note
        );
    }
    if let Some(table) = &outcome.table {
        out.push('\n');
        out.push_str(&table.render());
    }
    out
}

/// Writes to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let common = match &cli.command {
        Command::Table { results, study } => {
            emit(&load_convergence_table(results, study)?.render());
            return Ok(0);
        }
        Command::Price(c)
        | Command::Bound(c)
        | Command::Limit(c)
        | Command::Study(c)
        | Command::Verify(c)
        | Command::Run(c) => c,
    };
    let config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if matches!(cli.command, Command::Verify(_)) => ExperimentConfig::default(),
        None => return Err(CliError::Config("--config is required".into())),
    };
    let mode = resolve_mode(&cli.command, config.experiment.mode)?;
    let options = RunOptions {
        seed: common.seed,
        no_cache: common.no_cache,
        out_dir: common.out.clone(),
    };
    let outcome = run_experiment(&config, mode, &options)?;
    emit(&render_outcome(&outcome));
    if outcome.flagged() {
        eprintln!("WARN: numerical flags raised; see rows marked WARN");
    }
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
