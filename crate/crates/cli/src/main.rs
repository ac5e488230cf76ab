//! `odb`: runs the beamsplitter experiments and writes reports.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use odb_core::experiments::{
    run_adiabaticity_table, run_convergence, run_detuning_check, run_hom, run_pulse_export, run_swap_gkp,
    ConvergenceTarget, ExperimentConfig, RunOutput,
};

#[derive(Parser)]
#[command(name = "odb", version, about = "On-demand beamsplitter experiments for trapped-ion phonon modes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    dt_ns: Option<f64>,
    #[arg(long, global = true)]
    grid_points: Option<usize>,
    #[arg(long, global = true)]
    no_hopping_during_fc: bool,
    #[arg(long, global = true)]
    physical_phase_gate: bool,
    /// Exit with status 1 if any acceptance check fails.
    #[arg(long, global = true)]
    assert: bool,
}

#[derive(Subcommand)]
enum Command {
    /// 50:50 gate on one phonon per mode.
    Hom,
    /// Full exchange of two GKP states with phase compensation.
    SwapGkp,
    /// Population leakage between detuned modes.
    DetuneCheck,
    /// Adiabaticity figures of the conversion ramps.
    Adiabaticity,
    /// Sampled conversion ramps.
    PulseExport,
    /// Sensitivity of an experiment's infidelity to step and grid size.
    Convergence {
        #[arg(long, value_enum, default_value = "hom")]
        experiment: Experiment,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Hom,
    SwapGkp,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(dt) = common.dt_ns {
        config.dt_ns = dt;
    }
    if let Some(n) = common.grid_points {
        config.grid_points = n;
    }
    if common.no_hopping_during_fc {
        config.hopping_during_fc = false;
    }
    if common.physical_phase_gate {
        config.physical_phase_gate = true;
    }
    if let Some(out) = &common.out {
        config.out_dir = Some(out.display().to_string());
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<RunOutput> {
    let config = load_config(&cli.common)?;
    let out = match &cli.command {
        Command::Hom => run_hom(&config)?,
        Command::SwapGkp => run_swap_gkp(&config)?,
        Command::DetuneCheck => run_detuning_check(&config)?,
        Command::Adiabaticity => run_adiabaticity_table(&config)?,
        Command::PulseExport => run_pulse_export(&config)?,
        Command::Convergence { experiment } => {
            let target = match experiment {
                Experiment::Hom => ConvergenceTarget::Hom,
                Experiment::SwapGkp => ConvergenceTarget::SwapGkp,
            };
            run_convergence(&config, target)?
        }
    };
    let dir = PathBuf::from(config.out_dir.as_deref().unwrap_or("out"));
    out.write_to(&dir).with_context(|| format!("writing results to {}", dir.display()))?;
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            let r = &out.report;
            for (k, v) in &r.metrics {
                println!("{k} = {v:.6e}");
            }
            for c in &r.checks {
                println!("{} {} = {:.6e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value);
            }
            println!("wall clock {:.1} s", r.wall_clock_s);
            if cli.common.assert && !r.all_checks_pass() {
                return ExitCode::FAILURE;
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
