use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use log::error;

use dapspp_cli::{exit_code, runner, ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "dapspp", version, about = "Decoupled E-M diffusion sampling on closed-form priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (overrides `seeds` in the config).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sampler for every seed.
    Run(Common),
    /// Repeat `run` over values of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of sigma_bar, rho, gamma, J, K.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Per-cycle gradient balance, warm starts and the DPS regrouping check.
    Diagnose(Common),
    /// Compare sampler moments with the exact mixture posterior.
    OracleCheck(Common),
}

fn load(c: &Common) -> Result<(RunConfig, PathBuf)> {
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    }
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seeds) = &c.seeds {
        cfg.seeds = seeds.clone();
        cfg.validate()?;
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| ConfigError("out: no output directory (use --out or output_dir)".into()))?;
    Ok((cfg, out))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let (cfg, out) = load(&c)?;
            for s in runner::run(&cfg, &out)? {
                println!("seed {}: nfe {} residual ratio {:.4}", s.seed, s.nfe, s.residual_ratio);
            }
        }
        Command::Sweep { common, param, values } => {
            let (cfg, out) = load(&common)?;
            for r in runner::sweep(&cfg, &param, &values, &out)? {
                println!("{param} = {}: nfe {}", r.value, r.nfe());
            }
        }
        Command::Diagnose(c) => {
            let (cfg, out) = load(&c)?;
            for (seed, rows) in runner::diagnose(&cfg, &out)? {
                let kmin = rows.iter().map(|r| r.kappa).fold(f64::INFINITY, f64::min);
                let eq = rows.iter().map(|r| r.equiv_max_abs_diff).fold(0.0, f64::max);
                println!("seed {seed}: min kappa {kmin:.3e}, max equivalence diff {eq:.3e}");
            }
        }
        Command::OracleCheck(c) => {
            let (cfg, out) = load(&c)?;
            let report = runner::oracle_check(&cfg, &out)?;
            println!("{}", runner::oracle_table(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DAPSPP_LOG", "warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
