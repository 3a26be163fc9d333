use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flars_cli::commands::{self, ReportInputs};
use flars_cli::config::ProjectConfig;
use flars_cli::error::CliError;

/// Variable selection for scalar-on-function regression with functional
/// LARS, with an optional Gaussian-process random-effects layer.
#[derive(Parser, Debug)]
#[command(name = "flars", version)]
struct Cli {
    /// Project configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Runs the selection path and applies the stopping rule.
    Select {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Fits the selected variables, with random effects if enabled.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        vars: FitVars,
    },
    /// Predicts from a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Runs simulation replications.
    Simulate {
        /// Overrides `simulation.reps`.
        #[arg(long)]
        reps: Option<usize>,
        /// Overrides `simulation.scenario`.
        #[arg(long)]
        scenario: Option<u8>,
        /// Also writes one generated dataset (train and test) here.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Writes plot data for a trace and/or a model.
    Report {
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct FitVars {
    /// Comma-separated variable ids.
    #[arg(long, value_delimiter = ',')]
    selected: Option<Vec<String>>,
    /// A selection.json written by `select`.
    #[arg(long)]
    selection: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = ProjectConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::data("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::generic(e.to_string()))?;
    }
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Select { data } => {
            commands::select(&cfg, &data, &cli.out)?;
        }
        Command::Fit { data, vars } => {
            let selected = match (vars.selected, vars.selection) {
                (Some(v), _) => v.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                (None, Some(p)) => commands::read_selection(&p)?,
                (None, None) => unreachable!("clap requires one of the two"),
            };
            commands::fit(&cfg, &data, selected, &cli.out)?;
        }
        Command::Predict { model, data } => {
            commands::predict(&model, &data, &cli.out)?;
        }
        Command::Simulate {
            reps,
            scenario,
            export,
        } => {
            if let Some(s) = scenario {
                cfg.simulation.scenario = s;
            }
            if let Some(r) = reps {
                cfg.simulation.reps = r;
            }
            cfg.validate()?;
            commands::simulate(&cfg, cfg.simulation.reps, &cli.out, export.as_deref())?;
        }
        Command::Report { trace, model } => {
            commands::report(&cfg, &ReportInputs { trace, model }, &cli.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
