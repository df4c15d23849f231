//! `ctbuq`: phantom generation, scanning, both inference stages, diagnostics
//! and plots for CT boundary uncertainty experiments.
//!
//! Exit codes: 0 success, 1 I/O or parse error, 2 invalid or infeasible
//! configuration, 3 numerical failure.

mod commands;
mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ctbuq_core::Error;

use commands::Ctx;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "ctbuq", version, about = "Bayesian boundary detection and uncertainty bands for parallel-beam CT")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: single-smooth, single-rough, multi3, sparse, limited, lotus.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides `master_seed` of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Samples a phantom: phantom.json, truth.csv and the resolved config.json.
    Phantom,
    /// Simulates noisy data from a phantom: sinogram CSVs and noise.json.
    Scan {
        #[arg(long)]
        phantom: PathBuf,
    },
    /// Localizes inclusions: stage1.json.
    Stage1 {
        #[arg(long)]
        sinogram: PathBuf,
        /// noise.json from `scan`; otherwise sigma comes from the config.
        #[arg(long)]
        noise: Option<PathBuf>,
    },
    /// Boundary posteriors per inclusion: inclusion_<i>.json and chain_<i>.jsonl.
    Stage2 {
        #[arg(long)]
        sinogram: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        noise: Option<PathBuf>,
    },
    /// Full experiment: simulates data unless --sinogram is given, runs both
    /// stages and writes all plots.
    Run {
        #[arg(long)]
        sinogram: Option<PathBuf>,
        #[arg(long)]
        noise: Option<PathBuf>,
    },
    /// ACF, ESS and multi-chain agreement of chain files.
    Diagnose {
        #[arg(required = true)]
        chains: Vec<PathBuf>,
    },
    /// Redraws the figures of a run directory into --out.
    Plot {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let config = match (&common.config, &common.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            ExperimentConfig::parse(&text).with_context(|| format!("invalid config {}", path.display()))?
        }
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::preset("single-smooth")?,
    };
    config.validate()?;
    Ok(config)
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    let mut config = load_config(&cli.common)?;
    if let Some(seed) = cli.common.seed {
        config.master_seed = seed;
    }
    std::fs::create_dir_all(&cli.common.out)
        .with_context(|| format!("cannot create {}", cli.common.out.display()))?;
    let ctx = Ctx {
        seed: config.master_seed,
        config,
        out: cli.common.out,
    };
    match cli.command {
        Command::Phantom => {
            commands::write_config(&ctx)?;
            let ph = commands::phantom(&ctx)?;
            println!("phantom with {} inclusion(s) written to {}", ph.inclusions.len(), ctx.out.display());
        }
        Command::Scan { phantom } => {
            let ph = read_json(&phantom)?;
            let (_, noise) = commands::scan(&ctx, &ph)?;
            println!("sinogram written, sigma_noise = {:.6e}", noise.sigma_noise);
        }
        Command::Stage1 { sinogram, noise } => {
            let y = commands::read_sinogram(&sinogram)?;
            let noise = commands::noise_model(&ctx, &y, noise.as_deref())?;
            let s1 = commands::run_stage1(&ctx, &y, &noise)?;
            print_stage1(&s1);
        }
        Command::Stage2 { sinogram, stage1, noise } => {
            let y = commands::read_sinogram(&sinogram)?;
            let noise = commands::noise_model(&ctx, &y, noise.as_deref())?;
            let s1 = read_json(&stage1)?;
            for s in commands::run_stage2(&ctx, &y, &noise, &s1)? {
                print_summary(&s);
            }
        }
        Command::Run { sinogram, noise } => {
            commands::write_config(&ctx)?;
            let (y, noise) = match sinogram {
                Some(path) => {
                    let y = commands::read_sinogram(&path)?;
                    let noise = commands::noise_model(&ctx, &y, noise.as_deref())?;
                    std::fs::write(ctx.out.join("sinogram.csv"), y.to_csv())?;
                    (y, noise)
                }
                None => {
                    let ph = commands::phantom(&ctx)?;
                    commands::scan(&ctx, &ph)?
                }
            };
            let s1 = commands::run_stage1(&ctx, &y, &noise)?;
            print_stage1(&s1);
            let stage2 = commands::run_stage2(&ctx, &y, &noise, &s1);
            let n = commands::plot_dir(&ctx.out, &ctx.out)?;
            for s in stage2? {
                print_summary(&s);
            }
            println!("{n} figures written to {}", ctx.out.display());
        }
        Command::Diagnose { chains } => {
            let d = commands::diagnose(&ctx, &chains)?;
            for c in &d.chains {
                match c.ess {
                    Some(e) => println!("{}: {} samples, ESS {e:.1}", c.file, c.n_samples),
                    None => println!("{}: {} samples, ESS undefined", c.file, c.n_samples),
                }
            }
            if let Some(m) = &d.multi_chain {
                println!("max distance between chain mean curves: {:.4e}", m.max_pairwise_distance);
            }
        }
        Command::Plot { input } => {
            let n = commands::plot_dir(&input, &ctx.out)?;
            println!("{n} figures written to {}", ctx.out.display());
        }
    }
    Ok(())
}

fn print_stage1(s1: &ctbuq_core::pipeline::Stage1Result) {
    println!("stage 1: {} inclusion(s), pCN acceptance {:.3}", s1.n_inc, s1.acceptance_rate);
    for (i, c) in s1.centers.iter().enumerate() {
        println!("  inclusion {i}: center of mass ({:.4}, {:.4})", c.x, c.y);
    }
}

fn print_summary(s: &ctbuq_core::pipeline::PosteriorSummary) {
    let m = s.first_mode();
    println!(
        "stage 2, inclusion {}: {} mode(s), first mode mass {:.3}, mean band width {:.4}, global variance {:.4e}",
        s.inclusion_index,
        s.modes.len(),
        m.mass,
        m.band.mean_width(),
        s.global_variance
    );
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Parse(_) => 1,
                Error::InvalidArgument(_) | Error::Infeasible(_) => 2,
                _ => 3,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
