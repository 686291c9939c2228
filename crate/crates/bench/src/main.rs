use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtsad_bench::config::parse_seeds;
use mtsad_bench::{report, Bench, BenchConfig};

#[derive(Parser)]
#[command(name = "bench", version, about = "Multivariate time-series anomaly detection benchmark")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Output directory, replacing the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent grid cells.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Restrict to this dataset; repeatable.
    #[arg(long, global = true)]
    dataset: Vec<String>,
    /// Restrict to this method; repeatable.
    #[arg(long, global = true)]
    method: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Train and score every (method, dataset, seed) cell.
    Effectiveness,
    /// Score under noise, channel dropout and time shift.
    Robustness,
    /// Source-by-target matrices under each method's channel policy.
    Transfer,
    /// Parameter counts, throughput, latency and peak memory.
    Efficiency,
    /// Re-render tables from the reports of an earlier run.
    Report,
}

fn load(cli: &Cli) -> anyhow::Result<BenchConfig> {
    let mut cfg = match &cli.config {
        Some(p) => BenchConfig::from_file(p)?,
        None => BenchConfig::desk_suite(),
    };
    if let Some(s) = &cli.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(o) = &cli.out {
        cfg.out.clone_from(o);
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.restrict(&cli.dataset, &cli.method)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<usize> {
    let cfg = load(cli)?;
    if let Verb::Report = cli.verb {
        let dir = cfg.out.join(cfg.run_id());
        for p in report::emit_tables(&dir)? {
            println!("{}", p.display());
        }
        return Ok(0);
    }
    let bench = Bench::new(cfg)?;
    let failures = match cli.verb {
        Verb::Effectiveness => bench.effectiveness()?.failures,
        Verb::Robustness => bench.robustness()?.failures,
        Verb::Transfer => bench.transfer()?.failures,
        Verb::Efficiency => bench.efficiency()?.failures,
        Verb::Report => unreachable!(),
    };
    report::emit_tables(&bench.run_dir)?;
    let (trained, reused) = bench.training_counts();
    log::info!("{trained} models trained, {reused} checkpoints reused");
    println!("{}", bench.run_dir.display());
    Ok(failures)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} cell(s) failed; see the reports for details");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
