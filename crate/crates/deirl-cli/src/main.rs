use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use deirl::eirl::Injection;
use deirl::evalharness::{self, StudyConfig, StudyReport};

#[derive(Parser)]
#[command(name = "deirl", version, about = "EIRL/dEIRL learning studies on the hypersonic vehicle and LTI plants")]
struct Cli {
    #[command(subcommand)]
    study: Study,
    /// Study configuration; defaults replicate the published setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Plant lift parameter; for eval2, the single perturbation to run.
    #[arg(long, global = true)]
    nu: Option<f64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
}

#[derive(Subcommand, Clone, Copy)]
enum Study {
    /// Conditioning and convergence on the nominal model.
    Eval1,
    /// Optimality recovery under model perturbation.
    Eval2,
    /// Closed-loop frequency responses under the initial gains.
    Freqresp,
    /// Kleinman/CARE reference solutions.
    Oracle,
    /// One excited closed-loop run; exports the trajectory.
    Simulate,
}

#[derive(ValueEnum, Clone, Copy)]
enum Mode {
    Si,
    Mi,
}

fn run(cli: &Cli) -> anyhow::Result<StudyReport> {
    let mut cfg = match &cli.config {
        Some(p) => StudyConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => StudyConfig::hsv_default(),
    };
    if let Some(nu) = cli.nu {
        cfg.nu = nu;
        cfg.nu_list = vec![nu];
    }
    if let Some(m) = cli.mode {
        cfg.mode = match m {
            Mode::Si => Injection::Si,
            Mode::Mi => Injection::Mi,
        };
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    let report = match cli.study {
        Study::Eval1 => evalharness::cmd_eval1(&cfg),
        Study::Eval2 => evalharness::cmd_eval2(&cfg),
        Study::Freqresp => evalharness::cmd_freqresp(&cfg),
        Study::Oracle => evalharness::cmd_oracle(&cfg),
        Study::Simulate => evalharness::cmd_simulate(&cfg),
    }?;
    report.write_to(&cfg.out).with_context(|| format!("writing {}", cfg.out.display()))?;
    Ok(report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            print!("{}", report.summary());
            if report.acceptance_failed() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
