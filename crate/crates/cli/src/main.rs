//! Command-line front end: train, compare, sweep, inspect.
//!
//! Exit codes: 0 success, 1 runtime failure (a run diverged, an artifact
//! could not be written, a checkpoint failed to load), 2 usage or config
//! error (bad flags, unreadable or invalid config, impossible request).
//! Compare and sweep write their result tables before reporting per-run
//! failures, so partial results survive a failed run. All file writes go
//! through a temp-file rename and input files are never mutated.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dynlora::checkpoint::{
    describe_checkpoint, load_checkpoint, save_checkpoint, write_atomic, Checkpoint,
};
use dynlora::compare::{compare, effective_train_config, run_single, RunFailure};
use dynlora::config::{load_config, RunConfig};
use dynlora::report::{
    alpha_trace_csv, comparison_csv, format_metric_report, loss_curve_csv, render_table, sweep_csv,
};
use dynlora::train::RunRecord;
use dynlora::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dynlora",
    version,
    about = "Dynamic low-rank adaptation benchmark harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one strategy on one seed and write the run artifacts.
    Train(ConfigArgs),
    /// Run every configured strategy across all seeds and tabulate.
    Compare(GridArgs),
    /// Train the configured hyperparameter grid.
    Sweep(GridArgs),
    /// Summarize a saved checkpoint.
    Inspect {
        /// Path to a checkpoint file written by train.
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Worker threads for independent runs (1 = serial).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
}

/// On-disk record of one training run: the fully resolved config that
/// replays it, plus everything the run measured.
#[derive(Serialize)]
struct RunDocument<'a> {
    config: &'a RunConfig,
    record: &'a RunRecord,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Inspect { checkpoint } => cmd_inspect(checkpoint),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}

/// Load, validate, and apply the command-line overrides.
fn load_effective(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = load_config(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn prepare_output(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::config(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })
}

/// Size the global worker pool once per process. Returns whether the
/// run fan-out should actually go parallel.
fn configure_jobs(jobs: u64) -> Result<bool> {
    if jobs <= 1 {
        return Ok(false);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs as usize)
        .build_global()
        .map_err(|e| Error::contract(format!("cannot size worker pool to {jobs} threads: {e}")))?;
    Ok(true)
}

fn cmd_train(args: &ConfigArgs) -> Result<u8> {
    let cfg = load_effective(args)?;
    let [tag] = cfg.strategies[..] else {
        return Err(Error::config(format!(
            "train runs exactly one strategy, config lists {}; use compare for several",
            cfg.strategies.len()
        )));
    };
    let [seed] = cfg.seeds[..] else {
        return Err(Error::config(format!(
            "train runs exactly one seed, config lists {}; pass --seed to pick one",
            cfg.seeds.len()
        )));
    };
    let data = cfg.build_dataset()?;
    prepare_output(&cfg.output_dir)?;

    let (model, record) = match run_single(
        &cfg.model.dims,
        cfg.model.n_classes,
        &data,
        tag,
        &cfg.train,
        seed,
    ) {
        Ok(done) => done,
        Err(e) => {
            eprintln!("run {} (seed {seed}) failed", tag.name());
            return Err(e);
        }
    };

    // The embedded config carries every default and override already
    // resolved, so feeding run_record.json's config back through train
    // replays this exact run.
    let mut resolved = cfg.clone();
    resolved.train = effective_train_config(tag, &cfg.train, seed);
    resolved.strategies = vec![tag];
    resolved.seeds = vec![seed];
    let doc = serde_json::to_string_pretty(&RunDocument {
        config: &resolved,
        record: &record,
    })?;

    let out = &cfg.output_dir;
    write_atomic(&out.join("loss_curve.csv"), &loss_curve_csv(&record))?;
    write_atomic(&out.join("alpha_trace.csv"), &alpha_trace_csv(&record))?;
    save_checkpoint(&out.join("checkpoint.json"), &Checkpoint::new(seed, model))?;
    write_atomic(&out.join("run_record.json"), &doc)?;

    println!("{}", format_metric_report(&record.test));
    Ok(0)
}

fn cmd_compare(args: &GridArgs) -> Result<u8> {
    let cfg = load_effective(&args.config)?;
    if cfg.strategies.len() < 2 {
        return Err(Error::config(format!(
            "compare needs at least two strategies, config lists {}",
            cfg.strategies.len()
        )));
    }
    let parallel = configure_jobs(args.jobs)?;
    let data = cfg.build_dataset()?;
    prepare_output(&cfg.output_dir)?;
    let cmp = compare(
        &cfg.model.dims,
        cfg.model.n_classes,
        &data,
        &cfg.strategies,
        &cfg.train,
        &cfg.seeds,
        parallel,
    )?;
    write_atomic(
        &cfg.output_dir.join("comparison.csv"),
        &comparison_csv(&cmp.rows),
    )?;
    print!("{}", render_table(&cmp.rows));
    report_failures(&cmp.failures)
}

fn cmd_sweep(args: &GridArgs) -> Result<u8> {
    let cfg = load_effective(&args.config)?;
    let Some(sweep) = &cfg.sweep else {
        return Err(Error::config(
            "config has no sweep section; add one or use train/compare".to_string(),
        ));
    };
    let parallel = configure_jobs(args.jobs)?;
    let grid = sweep.grid(&cfg.train);
    let data = cfg.build_dataset()?;
    prepare_output(&cfg.output_dir)?;

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (i, point) in grid.iter().enumerate() {
        println!(
            "[{}/{}] r_base={} lambda_adjust={} lambda1={} lambda2={} refresh_every={}",
            i + 1,
            grid.len(),
            point.r_base,
            point.lambda_adjust,
            point.lambda1,
            point.lambda2,
            point.refresh_every
        );
        let patched = point.patch(&cfg.train);
        let cmp = compare(
            &cfg.model.dims,
            cfg.model.n_classes,
            &data,
            &cfg.strategies,
            &patched,
            &cfg.seeds,
            parallel,
        )?;
        failures.extend(cmp.failures);
        for row in cmp.rows {
            entries.push((*point, row));
        }
    }
    write_atomic(&cfg.output_dir.join("sweep.csv"), &sweep_csv(&entries))?;
    report_failures(&failures)
}

fn report_failures(failures: &[RunFailure]) -> Result<u8> {
    for f in failures {
        eprintln!("run {} (seed {}) failed: {}", f.strategy.name(), f.seed, f.message);
    }
    Ok(if failures.is_empty() { 0 } else { 1 })
}

fn cmd_inspect(path: &Path) -> Result<u8> {
    let ckpt = load_checkpoint(path)?;
    print!("{}", describe_checkpoint(&ckpt));
    Ok(0)
}
