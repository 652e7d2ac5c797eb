//! `natgrad` command-line driver.
//!
//! Exit codes: 0 on success, 2 when some grid cells failed, 1 on usage or
//! configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use natgrad::experiment::{
    load_panels, report, run_experiment, write_generated, ExperimentConfig, ExperimentKind, ExperimentReport,
    RunOptions,
};

#[derive(Debug, Parser)]
#[command(name = "natgrad", version, about = "Natural vs Euclidean gradient descent on deep linear models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; replaces `output_dir` from the config.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config value, e.g. `run.step_size=0.01` or `grid.1.max_steps=500`.
    #[arg(long = "grid-override", value_name = "KEY=VALUE")]
    grid_override: Vec<String>,
}

#[derive(Debug, Args)]
struct ExecArgs {
    /// Recompute every cell, replacing results of a different config.
    #[arg(long)]
    force: bool,
    /// Number of cells computed in parallel.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the generated datasets of each seed as JSON.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run every grid cell and write trajectories, summary and manifest.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Run an `ntk_panels` config and print the kernel slices.
    ProbeNtk {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Print the summary of a finished run.
    Report {
        /// Output directory of the run.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Config whose `output_dir` to read, when `--output` is not given.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Partial(ExperimentReport),
}

impl From<natgrad::Error> for Failure {
    fn from(e: natgrad::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut config = ExperimentConfig::load(&args.config)?;
    for o in &args.grid_override {
        config.apply_override(o)?;
    }
    if let Some(out) = &args.output {
        config.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    config.validate()?;
    Ok(config)
}

fn execute(config: &ExperimentConfig, exec: &ExecArgs) -> Result<ExperimentReport, Failure> {
    let opts = RunOptions {
        force: exec.force,
        jobs: exec.jobs,
    };
    let rep = run_experiment(config, &opts)?;
    println!(
        "{}: {} computed, {} skipped, {} failed",
        config.output_dir.display(),
        rep.computed,
        rep.skipped,
        rep.n_failed()
    );
    Ok(rep)
}

fn finish(rep: ExperimentReport) -> Result<(), Failure> {
    if rep.n_failed() > 0 {
        Err(Failure::Partial(rep))
    } else {
        Ok(())
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { config } => {
            let cfg = load(&config)?;
            let dir = config.output.unwrap_or_else(|| cfg.output_dir.join("generated"));
            for path in write_generated(&cfg, &dir)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Run { config, exec } => {
            let cfg = load(&config)?;
            finish(execute(&cfg, &exec)?)
        }
        Command::ProbeNtk { config, exec } => {
            let cfg = load(&config)?;
            if cfg.experiment != ExperimentKind::NtkPanels {
                return Err(Failure::Usage("probe-ntk needs an ntk_panels config".into()));
            }
            let rep = execute(&cfg, &exec)?;
            for ((mode, depth), m) in load_panels(&cfg.output_dir)? {
                println!("\n{} L={depth}", mode.name());
                for row in m.row_iter() {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:>9.2e}")).collect();
                    println!("{}", cells.join(" "));
                }
            }
            finish(rep)
        }
        Command::Report { output, config } => {
            let dir = match (output, config) {
                (Some(dir), _) => dir,
                (None, Some(path)) => ExperimentConfig::load(&path)?.output_dir,
                (None, None) => return Err(Failure::Usage("report needs --output or --config".into())),
            };
            print!("{}", report(&dir)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Partial(rep)) => {
            for c in rep.manifest.cells.iter().filter(|c| c.error.is_some()) {
                eprintln!("cell {} failed: {}", c.id, c.error.as_deref().unwrap_or(""));
            }
            ExitCode::from(2)
        }
    }
}
