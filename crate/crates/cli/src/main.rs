//! Experiment runner CLI: generates synthetic suites, trains continual
//! learning strategies, runs evaluation batteries, and compares reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prospect_core::error::Error;
use prospect_core::experiment::{
    cmd_compare, cmd_gen_data, cmd_run, cmd_shift_sweep, write_compare_csv, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "prospect", version, about = "Continual multitask learning experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Offset added to every configured seed.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed_offset: u64,
    /// Parallel worker slots for independent (strategy, seed) cells.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Export the configured suite as per-task CSV files.
    GenData(ConfigArgs),
    /// Train the full strategy x seed grid and write the report.
    Run(ConfigArgs),
    /// Shift-magnitude sweep: prospective vs conventional rehearsal.
    ShiftSweep(ConfigArgs),
    /// FGSM and noise robustness curves.
    Robustness(ConfigArgs),
    /// Lyapunov exponents of predicted trajectories.
    Lyapunov(ConfigArgs),
    /// Closed-loop rollout deviations using the learned dynamics model.
    ClosedLoop(ConfigArgs),
    /// Wilcoxon significance table across report arms.
    Compare {
        /// report.json paths (one or more).
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Metric to compare (e.g. r2, nrmse, fr, bwt).
        #[arg(long, default_value = "r2")]
        metric: String,
        /// Write the table as CSV here (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut config: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    } else if let Ok(out) = std::env::var("PROSPECT_OUT") {
        config.out_dir = PathBuf::from(out);
    }
    if let Some(jobs) = args.jobs {
        config.jobs = jobs;
    } else if let Ok(jobs) = std::env::var("PROSPECT_JOBS") {
        config.jobs = jobs
            .parse()
            .map_err(|_| Error::Config(format!("PROSPECT_JOBS is not a number: {jobs}")))?;
    }
    if args.seed_offset != 0 {
        for seed in &mut config.seeds {
            *seed += args.seed_offset;
        }
    }
    config.validate()?;
    Ok(config)
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData(args) => {
            let config = load_config(&args)?;
            let paths = cmd_gen_data(&config)?;
            println!("wrote {} task files under {}", paths.len(), config.out_dir.display());
        }
        Command::Run(args) => {
            let config = load_config(&args)?;
            let report = cmd_run(&config)?;
            println!(
                "ok: {} records, {} curves, {:.1}s -> {}",
                report.records.len(),
                report.curves.len(),
                report.wall_clock_seconds,
                config.out_dir.display()
            );
        }
        Command::ShiftSweep(args) => {
            let config = load_config(&args)?;
            let summary = cmd_shift_sweep(&config)?;
            println!(
                "shift sweep: {} points, pearson r = {:.4}, slope = {:.4} -> {}",
                summary.points.len(),
                summary.pearson_r,
                summary.slope,
                config.out_dir.display()
            );
        }
        Command::Robustness(args) => {
            let mut config = load_config(&args)?;
            config.battery.fgsm = true;
            config.battery.noise = true;
            let report = cmd_run(&config)?;
            println!(
                "robustness curves: {} points -> {}",
                report.curves.len(),
                config.out_dir.join("curves.csv").display()
            );
        }
        Command::Lyapunov(args) => {
            let mut config = load_config(&args)?;
            config.battery.lyapunov = true;
            config.validate()?;
            let report = cmd_run(&config)?;
            let exps: Vec<&prospect_core::metrics::MetricRecord> = report
                .records
                .iter()
                .filter(|r| r.metric.starts_with("lyapunov"))
                .collect();
            println!("lyapunov: {} exponent records -> {}", exps.len(), config.out_dir.display());
        }
        Command::ClosedLoop(args) => {
            let mut config = load_config(&args)?;
            config.battery.closed_loop = true;
            let report = cmd_run(&config)?;
            println!(
                "closed-loop: {} curve points -> {}",
                report.curves.len(),
                config.out_dir.join("curves.csv").display()
            );
        }
        Command::Compare { reports, metric, out } => {
            let rows = cmd_compare(&reports, &metric)?;
            println!("arm_a,arm_b,task,n,w,p_raw,p_bonferroni,stars");
            for r in &rows {
                println!(
                    "{},{},{},{},{},{:.3e},{:.3e},{}",
                    r.arm_a, r.arm_b, r.task, r.n, r.w_statistic, r.p_raw, r.p_bonferroni, r.stars
                );
            }
            if let Some(path) = out {
                write_compare_csv(&rows, &path)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
