//! Declarative run configuration.
//!
//! A single JSON document drives every command: model shape, dataset
//! source, trainer hyperparameters, strategy set, seeds, output
//! directory, and an optional sweep grid. Unknown keys are rejected so
//! typos fail fast, and everything is validated before any compute.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_layer_concentrated_task, gen_mixture_task, load_csv_dataset, Dataset};
use crate::error::{Error, Result};
use crate::network::init_model;
use crate::strategy::StrategyTag;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Input width followed by each body layer's output width.
    pub dims: Vec<usize>,
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn min_layer_dim(&self) -> usize {
        self.dims.iter().copied().min().unwrap_or(0)
    }
}

/// Where the dataset comes from. The dataset is built once per command
/// and shared read-only by every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Seeded Gaussian mixture, one cluster per class.
    Mixture {
        n: usize,
        #[serde(default = "default_difficulty")]
        difficulty: f64,
        seed: u64,
    },
    /// Teacher task whose signal is a low-rank delta on one layer of a
    /// base model drawn from the same seed.
    LayerConcentrated {
        n: usize,
        layer: usize,
        perturb_rank: usize,
        seed: u64,
    },
    /// Pre-embedded features from a CSV file (header f0..fD-1,label).
    Csv { path: PathBuf, seed: u64 },
}

fn default_difficulty() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Grid axes; an empty axis means "use the base train value".
    #[serde(default)]
    pub r_base: Vec<usize>,
    #[serde(default)]
    pub lambda_adjust: Vec<f64>,
    #[serde(default)]
    pub lambda1: Vec<f64>,
    #[serde(default)]
    pub lambda2: Vec<f64>,
    #[serde(default)]
    pub refresh_every: Vec<usize>,
    /// Refuse grids larger than this many points.
    #[serde(default = "default_max_grid")]
    pub max_grid: usize,
}

fn default_max_grid() -> usize {
    256
}

/// One concrete point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub r_base: usize,
    pub lambda_adjust: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub refresh_every: usize,
}

impl GridPoint {
    /// Base train config with this point's values substituted in.
    pub fn patch(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.schedule.r_base = self.r_base;
        cfg.schedule.lambda_adjust = self.lambda_adjust;
        cfg.schedule.refresh_every = self.refresh_every;
        cfg.lambda1 = self.lambda1;
        cfg.lambda2 = self.lambda2;
        cfg
    }
}

impl SweepSpec {
    /// Cartesian product in declaration order: r_base is the outermost
    /// axis, refresh_every the innermost. Empty axes collapse to the
    /// base value, so the grid is never empty.
    pub fn grid(&self, base: &TrainConfig) -> Vec<GridPoint> {
        fn axis<T: Copy>(vals: &[T], fallback: T) -> Vec<T> {
            if vals.is_empty() {
                vec![fallback]
            } else {
                vals.to_vec()
            }
        }
        let rs = axis(&self.r_base, base.schedule.r_base);
        let lams = axis(&self.lambda_adjust, base.schedule.lambda_adjust);
        let l1s = axis(&self.lambda1, base.lambda1);
        let l2s = axis(&self.lambda2, base.lambda2);
        let refs = axis(&self.refresh_every, base.schedule.refresh_every);
        let mut out = Vec::new();
        for &r_base in &rs {
            for &lambda_adjust in &lams {
                for &lambda1 in &l1s {
                    for &lambda2 in &l2s {
                        for &refresh_every in &refs {
                            out.push(GridPoint {
                                r_base,
                                lambda_adjust,
                                lambda1,
                                lambda2,
                                refresh_every,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub strategies: Vec<StrategyTag>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Read and validate a config file. All failures are config errors
/// that name the file; parse errors carry the offending field path.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&raw, &path.display().to_string())
}

/// Parse and validate a config document; `origin` names it in errors.
pub fn parse_config(raw: &str, origin: &str) -> Result<RunConfig> {
    let mut de = serde_json::Deserializer::from_str(raw);
    let cfg: RunConfig = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| Error::config(format!("invalid config {origin}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model.dims.len() < 2 {
            return Err(Error::config(
                "model.dims must list the input width and at least one layer width".to_string(),
            ));
        }
        if self.model.dims.iter().any(|&d| d == 0) {
            return Err(Error::config("model.dims entries must be positive".to_string()));
        }
        if self.model.n_classes < 2 {
            return Err(Error::config(format!(
                "model.n_classes must be at least 2, got {}",
                self.model.n_classes
            )));
        }
        self.train.validate()?;
        if self.strategies.is_empty() {
            return Err(Error::config("strategies must name at least one strategy".to_string()));
        }
        for (i, tag) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(tag) {
                return Err(Error::config(format!(
                    "strategies lists {} twice",
                    tag.name()
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must list at least one seed".to_string()));
        }
        for (i, seed) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(seed) {
                return Err(Error::config(format!("seeds lists {seed} twice")));
            }
        }
        let min_dim = self.model.min_layer_dim();
        let lora = self.strategies.iter().any(|t| t.uses_lora());
        if lora && self.train.schedule.r_base > min_dim {
            return Err(Error::config(format!(
                "train.schedule.r_base {} exceeds the smallest layer dimension {min_dim}",
                self.train.schedule.r_base
            )));
        }
        self.validate_data()?;
        if let Some(sweep) = &self.sweep {
            self.validate_sweep(sweep, min_dim)?;
        }
        Ok(())
    }

    fn validate_data(&self) -> Result<()> {
        match &self.data {
            DataSpec::Mixture { n, difficulty, .. } => {
                if *n < self.model.n_classes * 10 {
                    return Err(Error::config(format!(
                        "data.n must be at least 10 per class ({} total), got {n}",
                        self.model.n_classes * 10
                    )));
                }
                if !difficulty.is_finite() || *difficulty < 0.0 {
                    return Err(Error::config(format!(
                        "data.difficulty must be finite and non-negative, got {difficulty}"
                    )));
                }
            }
            DataSpec::LayerConcentrated {
                n,
                layer,
                perturb_rank,
                ..
            } => {
                let n_layers = self.model.dims.len() - 1;
                if *layer >= n_layers {
                    return Err(Error::config(format!(
                        "data.layer {layer} out of range for {n_layers} layers"
                    )));
                }
                let d_in = self.model.dims[*layer];
                let d_out = self.model.dims[*layer + 1];
                if *perturb_rank > d_in.min(d_out) {
                    return Err(Error::config(format!(
                        "data.perturb_rank {perturb_rank} exceeds min({d_in}, {d_out})"
                    )));
                }
                if *n < self.model.n_classes * 10 {
                    return Err(Error::config(format!(
                        "data.n must be at least 10 per class ({} total), got {n}",
                        self.model.n_classes * 10
                    )));
                }
            }
            DataSpec::Csv { path, .. } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::config("data.path must not be empty".to_string()));
                }
            }
        }
        Ok(())
    }

    fn validate_sweep(&self, sweep: &SweepSpec, min_dim: usize) -> Result<()> {
        if sweep.max_grid == 0 {
            return Err(Error::config("sweep.max_grid must be at least 1".to_string()));
        }
        if let Some(&r) = sweep.r_base.iter().find(|&&r| r == 0 || r > min_dim) {
            return Err(Error::config(format!(
                "sweep.r_base value {r} outside [1, {min_dim}]"
            )));
        }
        if let Some(&l) = sweep
            .lambda_adjust
            .iter()
            .find(|l| !l.is_finite() || **l < 0.0)
        {
            return Err(Error::config(format!(
                "sweep.lambda_adjust value {l} must be finite and non-negative"
            )));
        }
        for (name, vals) in [("lambda1", &sweep.lambda1), ("lambda2", &sweep.lambda2)] {
            if let Some(&l) = vals.iter().find(|l| !l.is_finite() || **l < 0.0) {
                return Err(Error::config(format!(
                    "sweep.{name} value {l} must be finite and non-negative"
                )));
            }
        }
        if sweep.refresh_every.contains(&0) {
            return Err(Error::config(
                "sweep.refresh_every values must be at least 1".to_string(),
            ));
        }
        let size = self.grid_size(sweep);
        if size > sweep.max_grid {
            return Err(Error::config(format!(
                "sweep grid has {size} points, above the max_grid cap of {}",
                sweep.max_grid
            )));
        }
        Ok(())
    }

    fn grid_size(&self, sweep: &SweepSpec) -> usize {
        [
            sweep.r_base.len(),
            sweep.lambda_adjust.len(),
            sweep.lambda1.len(),
            sweep.lambda2.len(),
            sweep.refresh_every.len(),
        ]
        .iter()
        .map(|&n| n.max(1))
        .product()
    }

    /// Materialize the dataset this config describes. Layer-concentrated
    /// tasks draw their teacher base from the data seed, so the dataset
    /// is identical for every run regardless of run seeds.
    pub fn build_dataset(&self) -> Result<Dataset> {
        let d_in = self.model.dims[0];
        match &self.data {
            DataSpec::Mixture {
                n,
                difficulty,
                seed,
            } => gen_mixture_task(*n, d_in, self.model.n_classes, *difficulty, *seed),
            DataSpec::LayerConcentrated {
                n,
                layer,
                perturb_rank,
                seed,
            } => {
                let base = init_model(&self.model.dims, self.model.n_classes, *seed)?;
                gen_layer_concentrated_task(&base, *layer, *perturb_rank, *n, *seed)
            }
            DataSpec::Csv { path, seed } => {
                let data = load_csv_dataset(path, self.model.n_classes, *seed)?;
                if data.dim() != d_in {
                    return Err(Error::config(format!(
                        "csv has {} feature columns but model.dims starts at {d_in}",
                        data.dim()
                    )));
                }
                Ok(data)
            }
        }
    }
}
