use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use visiopath_cli::manifest::{parse_seeds, parse_switch};
use visiopath_cli::{plot, run, verify, CliError, Method, RunManifest};

#[derive(Parser)]
#[command(name = "visiopath", version, about = "Closed-loop planner runs, traces and tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario for each seed and write traces, metrics and the aggregate table.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// mpc-zero-init, mpc-ref-init or mpc-fixed-interval
        #[arg(long, value_parser = |s: &str| s.parse::<Method>())]
        method: Method,
        /// on or off
        #[arg(long, default_value = "on", action = clap::ArgAction::Set, value_parser = |s: &str| parse_switch(s))]
        safety: bool,
        /// Comma-separated seeds and inclusive ranges, e.g. 0..=9,42
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive travel-time, headway and speed-profile columns from a trace directory.
    PlotData {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the safety check on every executed plan in a trace.
    Verify {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> Result<ExitCode, CliError> {
    match command {
        Command::Run {
            scenario,
            method,
            safety,
            seeds,
            out,
        } => {
            let manifest = RunManifest {
                scenario,
                method,
                safety,
                seeds: parse_seeds(&seeds)?,
                out,
            };
            let row = run::run(&manifest)?;
            let table = visiopath_cli::aggregate::render_table(std::slice::from_ref(&row))?;
            print!("{table}");
            Ok(ExitCode::SUCCESS)
        }
        Command::PlotData { traces, out } => {
            let s = plot::emit_plot_data(&traces, &out)?;
            println!(
                "{} traces, {} episodes, {} headway samples -> {}",
                s.traces,
                s.episodes,
                s.headway_samples,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { trace } => {
            let r = verify::verify_trace(&trace)?;
            for f in &r.findings {
                let what = if f.unsafe_plan { "unsafe" } else { "high-risk" };
                println!(
                    "cycle {} t={:.1}s episode {}: {what} {:?}",
                    f.cycle, f.time, f.episode, f.first_violation
                );
            }
            println!(
                "{} cycles, {} plans checked, {} unsafe, {} high-risk, {} collisions",
                r.cycles,
                r.plans_checked,
                r.unsafe_plans(),
                r.high_risk_plans(),
                r.collisions
            );
            // Distinct status so scripts can tell findings apart from errors.
            Ok(if r.unsafe_plans() > 0 {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            })
        }
    }
}
