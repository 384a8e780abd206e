use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cooprl::algorithms::ALGORITHMS;
use cooprl::env::ENVIRONMENTS;
use cooprl::harness::{exit_code, output_path, sweep_agents, write_results, ExperimentConfig};
use cooprl::Result;

#[derive(Parser)]
#[command(name = "cooprl", version, about = "Cooperative multi-agent tabular MDP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write the results CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Directory for the results file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        /// Added to every configured seed.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// List environment names and parameters.
    ListEnvs,
    /// List algorithm names.
    ListAlgos,
    /// Check a configuration without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            threads,
            seed_offset,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?.with_seed_offset(seed_offset);
            let records = sweep_agents(&cfg, threads)?;
            let path = output_path(&cfg, out.as_deref());
            write_results(&path, &records)?;
            for r in &records {
                println!("{} {} m={} seed={} R_K={:.6}", r.algo, r.mode, r.m, r.seed, r.final_regret());
            }
            println!("wrote {}", path.display());
        }
        Command::ListEnvs => {
            for (name, desc) in ENVIRONMENTS {
                println!("{name:<12} {desc}");
            }
        }
        Command::ListAlgos => {
            for (alg, desc) in ALGORITHMS {
                println!("{:<18} {desc}", alg.name());
            }
        }
        Command::Validate { config } => {
            ExperimentConfig::from_path(&config)?.validate()?;
            println!("ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
