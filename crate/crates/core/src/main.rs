use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use airfl::bounds::{bound_report, BoundConstants};
use airfl::config::ExperimentConfig;
use airfl::experiment;
use airfl::table::{build_table, run_sweep, SweepConfig};

/// Over-the-air federated learning simulator.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration for every seed it lists.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: `runs/<config file stem>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of a sweep.
    Sweep {
        #[arg(long)]
        sweep: PathBuf,
    },
    /// Build the accuracy table of a finished sweep.
    Table {
        #[arg(long)]
        sweep: PathBuf,
    },
    /// Evaluate the convergence bound over saved traces.
    BoundReport {
        /// Glob matching `seed-<s>.csv` trace files.
        #[arg(long)]
        trace: String,
        /// `key = value` file with L, sigma2, G2 and F0_minus_Fstar.
        #[arg(long)]
        constants: PathBuf,
        /// Directory for `bound_report.csv` and `bound_report.txt`
        /// (default: print the text report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let out = out.unwrap_or_else(|| {
                let stem = config.file_stem().unwrap_or_default();
                PathBuf::from("runs").join(stem)
            });
            let result = experiment::run(&cfg, &out)?;
            let s = &result.summary;
            println!(
                "{}: accuracy {:.2} +/- {:.2} % over {} seeds ({} diverged) -> {}",
                cfg.algorithm,
                100.0 * s.mean_accuracy(),
                100.0 * s.std_accuracy(),
                s.seeds.len(),
                s.diverged_count(),
                out.display()
            );
        }
        Command::Sweep { sweep } => {
            let sweep = SweepConfig::from_file(&sweep)?;
            run_sweep(&sweep, |cell, s| {
                println!(
                    "{}: {:.2} % ({} of {} diverged)",
                    cell.dir.display(),
                    100.0 * s.mean_accuracy(),
                    s.diverged_count(),
                    s.seeds.len()
                );
            })?;
        }
        Command::Table { sweep } => {
            let sweep = SweepConfig::from_file(&sweep)?;
            let table = build_table(&sweep)?;
            if !table.missing.is_empty() {
                eprintln!("missing run outputs for {} cells:", table.missing.len());
                for cell in &table.missing {
                    eprintln!("  {}", cell.dir.display());
                }
                print!("{}", table.text);
                return Ok(ExitCode::from(2));
            }
            std::fs::create_dir_all(&sweep.results_dir)?;
            std::fs::write(sweep.results_dir.join("table.csv"), &table.csv)?;
            std::fs::write(sweep.results_dir.join("table.txt"), &table.text)?;
            print!("{}", table.text);
        }
        Command::BoundReport {
            trace,
            constants,
            out,
        } => {
            let c = BoundConstants::parse(
                &std::fs::read_to_string(&constants)
                    .with_context(|| format!("reading {}", constants.display()))?,
            )?;
            let mut paths: Vec<PathBuf> = glob::glob(&trace)
                .context("invalid trace pattern")?
                .collect::<Result<_, _>>()?;
            paths.retain(|p| !p.to_string_lossy().ends_with(".eval.csv"));
            paths.sort();
            if paths.is_empty() {
                bail!("no trace files match `{trace}`");
            }
            let report = bound_report(&paths, &c)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join("bound_report.csv"), &report.csv)?;
                    std::fs::write(dir.join("bound_report.txt"), &report.text)?;
                    println!(
                        "wrote {} bound rows to {}",
                        report.terms.len(),
                        dir.display()
                    );
                }
                None => print!("{}", report.text),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
