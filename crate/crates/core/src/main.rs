use boltzslab::harness::{check_suite, emit, parse_epsilons, run_sweep, RunConfig};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "boltzslab",
    about = "Kinetic slab solver with diffuse-reflection wall: expansion construction, direct solves, eps sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline over the configured epsilons and emit CSV.
    Run {
        /// Flat key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated epsilon list (overrides the config).
        #[arg(long)]
        epsilons: Option<String>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Named preset used when no config file is given.
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Run a standalone property suite; exit code 0 iff all checks pass.
    Check {
        #[arg(long, value_parser = ["collision", "layer", "boundary", "euler"])]
        suite: String,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run() -> boltzslab::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            epsilons,
            out,
            preset,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::parse_file(&path)?,
                None => RunConfig::preset(&preset)?,
            };
            if let Some(list) = epsilons {
                cfg.epsilons = parse_epsilons(&list)?;
            }
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            cfg.validate()?;
            eprintln!(
                "running sweep over {:?} (velocity {}^3, slab nx = {})",
                cfg.epsilons, cfg.velocity_n, cfg.slab_nx
            );
            let (report, steps) = run_sweep(&cfg)?;
            emit(&report, &steps, &cfg, &cfg.out_dir)?;
            for r in &report.records {
                println!(
                    "eps = {:>6}: |F - M| = {:.4e}, |F - ansatz| = {:.4e}, \
                     weighted sup = {:.4e}, boundary = {:.2e}, {:.1}s",
                    r.eps,
                    r.sup_l2_vs_maxwellian,
                    r.sup_l2_vs_ansatz,
                    r.sup_weighted_linf,
                    r.sup_boundary_residual,
                    r.runtime_s
                );
            }
            if let Some(rates) = &report.rates {
                println!(
                    "fitted slopes: |F - M| ~ eps^{:.3}, combined ~ eps^{:.3}, \
                     scaled remainder spread x{:.2}",
                    rates.slope_l2_vs_maxwellian,
                    rates.slope_combined,
                    rates.scaled_remainder_spread
                );
            }
            println!("wrote {}", cfg.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { suite } => {
            let ok = check_suite(&suite)?;
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}
