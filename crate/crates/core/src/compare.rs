//! Strategy comparison harness: fan a (strategy x seed) grid of
//! independent runs out, aggregate per-strategy metrics, and keep
//! per-run failures attached to their run identity.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{init_model, Model};
use crate::strategy::{apply_strategy, StrategyTag};
use crate::train::{train, RunRecord, TrainConfig};

/// Per-run view of the shared train config. The run seed is stamped
/// in, and the rank schedule is neutralized for strategies that have
/// no adapters to schedule (the shared config legitimately carries
/// LoRA settings for the LoRA rows of the same comparison).
pub fn effective_train_config(tag: StrategyTag, base: &TrainConfig, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    if !tag.uses_lora() {
        cfg.schedule.lambda_adjust = 0.0;
    }
    cfg
}

/// One full run: fresh model, strategy applied, trained, evaluated.
pub fn run_single(
    dims: &[usize],
    n_classes: usize,
    data: &Dataset,
    tag: StrategyTag,
    base: &TrainConfig,
    seed: u64,
) -> Result<(Model, RunRecord)> {
    let cfg = effective_train_config(tag, base, seed);
    let model = init_model(dims, n_classes, seed)?;
    let mut model = apply_strategy(model, tag, &cfg)?;
    let record = train(&mut model, data, &cfg)?;
    Ok((model, record))
}

/// Mean and population standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

fn stat(xs: &[f64]) -> Stat {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Stat {
        mean,
        sd: var.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: StrategyTag,
    pub seeds: usize,
    pub acc: Stat,
    pub auc: Stat,
    pub f1: Stat,
    pub recall: Stat,
    /// Mean starting trainable-over-total body weight ratio, the
    /// configured capacity budget (exactly 2r/d for rank-r LoRA on
    /// width-d square layers).
    pub param_ratio: f64,
    /// Largest in-flight ratio seen across the runs.
    pub max_param_ratio: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub strategy: StrategyTag,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// One aggregate row per strategy with at least one finished run,
    /// sorted by mean accuracy descending (name breaks ties).
    pub rows: Vec<CompareRow>,
    /// Every finished run, in (strategy, seed) grid order.
    pub runs: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
}

fn aggregate(tag: StrategyTag, runs: &[&RunRecord]) -> CompareRow {
    let pick = |f: fn(&RunRecord) -> f64| -> Vec<f64> { runs.iter().map(|r| f(r)).collect() };
    CompareRow {
        strategy: tag,
        seeds: runs.len(),
        acc: stat(&pick(|r| r.test.accuracy)),
        auc: stat(&pick(|r| r.test.auc)),
        f1: stat(&pick(|r| r.test.f1_macro)),
        recall: stat(&pick(|r| r.test.recall_macro)),
        param_ratio: stat(&pick(|r| r.param_ratio)).mean,
        max_param_ratio: runs
            .iter()
            .map(|r| r.max_param_ratio)
            .fold(0.0, f64::max),
        train_seconds: stat(&pick(|r| r.train_seconds)).mean,
    }
}

/// Run every (strategy, seed) pair and aggregate. Failed runs are
/// reported, not fatal: surviving rows still aggregate every seed
/// that finished. `parallel` fans runs out across threads; results
/// are identical either way because runs are independent and the
/// aggregation order is the fixed grid order.
pub fn compare(
    dims: &[usize],
    n_classes: usize,
    data: &Dataset,
    tags: &[StrategyTag],
    base: &TrainConfig,
    seeds: &[u64],
    parallel: bool,
) -> Result<Comparison> {
    if tags.is_empty() {
        return Err(Error::contract("compare needs at least one strategy".to_string()));
    }
    if seeds.is_empty() {
        return Err(Error::contract("compare needs at least one seed".to_string()));
    }
    let jobs: Vec<(StrategyTag, u64)> = tags
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (t, s)))
        .collect();

    let outcomes = execute(&jobs, dims, n_classes, data, base, parallel);

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for ((tag, seed), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(record) => runs.push(record),
            Err(e) => failures.push(RunFailure {
                strategy: *tag,
                seed: *seed,
                message: e.to_string(),
            }),
        }
    }

    let mut rows: Vec<CompareRow> = tags
        .iter()
        .filter_map(|&tag| {
            let tag_runs: Vec<&RunRecord> =
                runs.iter().filter(|r| r.strategy == tag).collect();
            (!tag_runs.is_empty()).then(|| aggregate(tag, &tag_runs))
        })
        .collect();
    rows.sort_by(|a, b| {
        b.acc
            .mean
            .total_cmp(&a.acc.mean)
            .then_with(|| a.strategy.name().cmp(b.strategy.name()))
    });

    Ok(Comparison {
        rows,
        runs,
        failures,
    })
}

fn run_job(
    job: (StrategyTag, u64),
    dims: &[usize],
    n_classes: usize,
    data: &Dataset,
    base: &TrainConfig,
) -> Result<RunRecord> {
    run_single(dims, n_classes, data, job.0, base, job.1).map(|(_, record)| record)
}

#[cfg(feature = "parallel")]
fn execute(
    jobs: &[(StrategyTag, u64)],
    dims: &[usize],
    n_classes: usize,
    data: &Dataset,
    base: &TrainConfig,
    parallel: bool,
) -> Vec<Result<RunRecord>> {
    use rayon::prelude::*;
    if parallel {
        jobs.par_iter()
            .map(|&job| run_job(job, dims, n_classes, data, base))
            .collect()
    } else {
        jobs.iter()
            .map(|&job| run_job(job, dims, n_classes, data, base))
            .collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn execute(
    jobs: &[(StrategyTag, u64)],
    dims: &[usize],
    n_classes: usize,
    data: &Dataset,
    base: &TrainConfig,
    _parallel: bool,
) -> Vec<Result<RunRecord>> {
    jobs.iter()
        .map(|&job| run_job(job, dims, n_classes, data, base))
        .collect()
}
