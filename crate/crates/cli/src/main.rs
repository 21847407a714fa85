use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ceem_cli::{commands, Algorithm, CliError, Experiment, ExperimentConfig, Metric, ReproduceOptions};

#[derive(Parser)]
#[command(name = "ceem", version, about = "Gray-box system identification with CE-EM and particle EM")]
struct Cli {
    /// Output directory (overrides CEEM_OUT_DIR and the config's output.dir).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (overrides CEEM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Ceem,
    Pem,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    All,
    Eps,
    Rmse,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    Table1,
    Fig2,
    #[value(name = "fig3-reduced")]
    Fig3Reduced,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trajectory dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit parameters and write the learning history.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "ceem")]
        algorithm: AlgorithmArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score fitted parameters with ε(θ) and EKF prediction RMSE.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Parameter file written by `fit`.
        #[arg(long)]
        params: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        metric: MetricArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rerun a benchmark experiment.
    Reproduce {
        #[arg(value_enum)]
        experiment: ExperimentArg,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Seed of the randomly drawn system.
        #[arg(long)]
        seed: Option<u64>,
        /// Six coupled attractors for fig3-reduced.
        #[arg(long)]
        full: bool,
    },
}

fn env_parse<T: std::str::FromStr>(key: &str) -> Result<Option<T>, CliError> {
    match std::env::var(key) {
        Ok(v) => v.parse().map(Some).map_err(|_| CliError::Config(format!("{key}={v:?} is not valid"))),
        Err(_) => Ok(None),
    }
}

fn out_dir(cli: &Option<PathBuf>, config: Option<&ExperimentConfig>) -> Result<PathBuf, CliError> {
    if let Some(d) = cli {
        return Ok(d.clone());
    }
    if let Some(d) = env_parse::<PathBuf>("CEEM_OUT_DIR")? {
        return Ok(d);
    }
    Ok(config.and_then(|c| c.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => env_parse::<usize>("CEEM_THREADS")?,
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate { config, seed } => {
            let config = ExperimentConfig::load(&config)?;
            let out = out_dir(&cli.out_dir, Some(&config))?;
            commands::simulate(&config, seed.unwrap_or(config.data.seed), &out)?;
        }
        Command::Fit { config, algorithm, seed } => {
            let config = ExperimentConfig::load(&config)?;
            let out = out_dir(&cli.out_dir, Some(&config))?;
            let algorithm = match algorithm {
                AlgorithmArg::Ceem => Algorithm::Ceem,
                AlgorithmArg::Pem => Algorithm::Pem,
            };
            commands::fit(&config, algorithm, seed.unwrap_or(config.data.seed), &out)?;
        }
        Command::Evaluate { config, params, metric, seed } => {
            let config = ExperimentConfig::load(&config)?;
            let out = out_dir(&cli.out_dir, Some(&config))?;
            let metric = match metric {
                MetricArg::All => Metric::All,
                MetricArg::Eps => Metric::Eps,
                MetricArg::Rmse => Metric::Rmse,
            };
            commands::evaluate(&config, &params, metric, seed.unwrap_or(config.data.seed), &out)?;
        }
        Command::Reproduce { experiment, seeds, max_epochs, seed, full } => {
            let out = out_dir(&cli.out_dir, None)?;
            let experiment = match experiment {
                ExperimentArg::Table1 => Experiment::Table1,
                ExperimentArg::Fig2 => Experiment::Fig2,
                ExperimentArg::Fig3Reduced => Experiment::Fig3Reduced,
            };
            if full && experiment != Experiment::Fig3Reduced {
                return Err(CliError::Config("--full only applies to fig3-reduced".into()));
            }
            let options = ReproduceOptions { seeds, max_epochs, system_seed: seed, full };
            commands::reproduce(experiment, &options, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
