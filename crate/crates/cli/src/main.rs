use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ductprobe::harness::{
    run_experiment, run_forward, run_invert_obstacle, run_invert_wave, run_report, run_synthesis, ExperimentConfig,
    RunArtifacts,
};
use ductprobe::{Error, Result};

/// Meshfree duct-flow simulation and two-stage obstruction inversion.
#[derive(Debug, Parser)]
#[command(name = "ductprobe", version)]
struct Cli {
    /// Experiment config (TOML). Defaults to the preset of experiment 2.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed: noise uses it, the chain uses it plus one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Multiplies every fluid node count.
    #[arg(long, global = true)]
    resolution: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Coupled forward simulation with snapshot and energy output.
    Forward,
    /// Synthesizes noisy wave and wall-velocity measurements of the truth.
    Synth,
    /// Stage 1: recovers the bottom-edge wave datum from the measurements.
    InvertWave,
    /// Stage 2: samples the obstruction posterior.
    InvertObstacle,
    /// Runs experiment 1 to 8 end to end (or the `--config` experiment when no id is given).
    Experiment { id: Option<u32> },
    /// Prints the parameter table of a finished run.
    Report,
}

fn config(cli: &Cli, preset: Option<u32>) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(id)) => ExperimentConfig::preset(id)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let (Some(_), Some(id)) = (&cli.config, preset) {
        if cfg.id.is_some_and(|own| own != id) {
            return Err(Error::Config(format!("config describes experiment {:?}, not {id}", cfg.id)));
        }
        cfg.id = Some(id);
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(scale) = cli.resolution {
        cfg = cfg.with_resolution(scale)?;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn print_stage(art: &RunArtifacts, stage: &str) {
    println!("{stage}: {}", art.dir.display());
    for d in art.diagnostics(stage) {
        println!("  {d}");
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Forward => {
            let cfg = config(cli, None)?;
            print_stage(&run_forward(&cfg.forward, &cfg.output_dir())?, "forward");
        }
        Command::Synth => {
            let cfg = config(cli, None)?;
            print_stage(&run_synthesis(&cfg, &cfg.output_dir())?, "synth");
        }
        Command::InvertWave => {
            let cfg = config(cli, None)?;
            print_stage(&run_invert_wave(&cfg, &cfg.output_dir())?, "invert-wave");
        }
        Command::InvertObstacle => {
            let cfg = config(cli, None)?;
            print_stage(&run_invert_obstacle(&cfg, &cfg.output_dir())?, "invert-obstacle");
        }
        Command::Experiment { id } => {
            if id.is_none() && cli.config.is_none() {
                return Err(Error::Config("`experiment` needs an id or --config".into()));
            }
            let cfg = config(cli, *id)?;
            let (art, report) = run_experiment(&cfg, &cfg.output_dir())?;
            for stage in ["synth", "invert-wave", "invert-obstacle"] {
                print_stage(&art, stage);
            }
            print!("\n{}", report.markdown);
        }
        Command::Report => {
            let dir = match &cli.out {
                Some(out) => out.clone(),
                None => config(cli, None)?.output_dir(),
            };
            let (_, report) = run_report(&dir)?;
            print!("{}", report.markdown);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            // Unmet stage inputs are a usage problem, like bad configuration.
            if e.is_config() || matches!(e, Error::MissingArtifact(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
