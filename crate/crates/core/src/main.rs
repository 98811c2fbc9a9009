use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mfsgd::harness::{run_experiment, Experiment, ExperimentConfig, Scale};
use mfsgd::Error;

/// Mini-batch noisy SGD experiments on wide two-layer networks.
#[derive(Parser)]
#[command(name = "mfsgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One SGD run, probe traces to traces.csv.
    SingleRun(Common),
    /// Particle ODE approximation of the mean-field limit, to reference.csv.
    MeanfieldRun(Common),
    /// Variance of the final probe value across runs, per mini-batch size.
    Variance(Common),
    /// Fluctuation ensembles for several noise exponents.
    Clt(Common),
    /// Linear drift of the beta = 3/4 fluctuations.
    Drift(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Args)]
struct Common {
    /// Key-value configuration file; absent keys use the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Preset the configuration starts from.
    #[arg(long, value_enum, default_value = "desk")]
    scale: ScaleArg,
}

fn load(experiment: Experiment, args: &Common) -> Result<ExperimentConfig, Error> {
    let scale = match args.scale {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Paper => Scale::Paper,
    };
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            ExperimentConfig::parse(&text, experiment, scale)?
        }
        None => ExperimentConfig::preset(experiment, scale),
    };
    if cfg.experiment != experiment {
        return Err(Error::Config(format!(
            "config file is for `{}`, not `{}`",
            cfg.experiment.as_str(),
            experiment.as_str()
        )));
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.sgd.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = match &cli.command {
        Command::SingleRun(a) => (Experiment::SingleRun, a),
        Command::MeanfieldRun(a) => (Experiment::MeanfieldRun, a),
        Command::Variance(a) => (Experiment::VarianceReduction, a),
        Command::Clt(a) => (Experiment::CltTrajectory, a),
        Command::Drift(a) => (Experiment::DriftCheck, a),
    };
    match load(experiment, args).and_then(|cfg| run_experiment(&cfg)) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
