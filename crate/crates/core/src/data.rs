//! Dataset generation, CSV ingestion, and splits.
//!
//! Two synthetic families cover the benchmark: Gaussian mixtures with
//! orthogonal class centroids (difficulty shrinks the centroid radius),
//! and teacher-labeled tasks where the teacher differs from a base model
//! by a low-rank delta on exactly one layer, so the task's information is
//! concentrated where an adaptive method should spend its capacity.
//!
//! Every draw and the 70/15/15 split are keyed by an explicit seed; the
//! same (n, seed) always produces the same partition.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::argmax;
use crate::network::Model;
use crate::rng::{rng_for, stream};

/// Centroid radius at difficulty zero; higher difficulty divides it down.
const BASE_RADIUS: f64 = 6.0;

/// Fraction of the projected subspace the teacher delta removes.
const PERTURB_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels_for(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.features.rows() != n {
            return Err(Error::contract(format!(
                "{} feature rows for {n} labels",
                self.features.rows()
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::contract("need at least 2 classes".to_string()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                self.n_classes
            )));
        }
        let mut seen = vec![false; n];
        for &i in self
            .train_idx
            .iter()
            .chain(&self.val_idx)
            .chain(&self.test_idx)
        {
            if i >= n || seen[i] {
                return Err(Error::contract(
                    "split indices must partition the dataset".to_string(),
                ));
            }
            seen[i] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::contract(
                "split indices must cover every row".to_string(),
            ));
        }
        if self.train_idx.is_empty() || self.val_idx.is_empty() || self.test_idx.is_empty() {
            return Err(Error::contract("a split is empty".to_string()));
        }
        Ok(())
    }

    /// Write features and labels as CSV (header f0..f{d-1},label). Floats
    /// are printed with the shortest round-trip representation, so a
    /// write-read cycle reproduces the values exactly.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
        header.push("label".to_string());
        w.write_record(&header)?;
        for (i, &y) in self.labels.iter().enumerate() {
            let mut rec: Vec<String> = self
                .features
                .row(i)
                .iter()
                .map(|v| format!("{v}"))
                .collect();
            rec.push(format!("{y}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = match e.kind() {
            csv::ErrorKind::UnequalLengths { pos, .. } => {
                pos.as_ref().map(|p| p.line() as usize).unwrap_or(0)
            }
            _ => e.position().map(|p| p.line() as usize).unwrap_or(0),
        };
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            kind => Error::Parse {
                line,
                msg: format!("{kind:?}"),
            },
        }
    }
}

/// Deterministic 70/15/15 split of 0..n.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, stream::SPLIT);
    order.shuffle(&mut rng);
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let val_end = n_train + n_val;
    (
        order[..n_train].to_vec(),
        order[n_train..val_end].to_vec(),
        order[val_end..].to_vec(),
    )
}

fn check_population(n: usize, n_classes: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::contract(format!(
            "need at least 2 classes, got {n_classes}"
        )));
    }
    if n < 10 * n_classes {
        return Err(Error::contract(format!(
            "need at least {} samples for {n_classes} classes, got {n}",
            10 * n_classes
        )));
    }
    Ok(())
}

/// Gaussian mixture with orthonormal centroid directions. Class sizes are
/// balanced to within one sample; difficulty >= 0 shrinks the centroid
/// radius as BASE_RADIUS / (1 + difficulty).
pub fn gen_mixture_task(
    n: usize,
    d: usize,
    n_classes: usize,
    difficulty: f64,
    seed: u64,
) -> Result<Dataset> {
    check_population(n, n_classes)?;
    if d < n_classes {
        return Err(Error::contract(format!(
            "need dimension >= {n_classes} for orthogonal centroids, got {d}"
        )));
    }
    if !difficulty.is_finite() || difficulty < 0.0 {
        return Err(Error::contract(format!(
            "difficulty must be finite and non-negative, got {difficulty}"
        )));
    }
    let mut rng = rng_for(seed, stream::DATA);
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let dirs = orthonormal_directions(d, n_classes, &mut rng)?;

    let radius = BASE_RADIUS / (1.0 + difficulty);
    let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for j in 0..d {
            data.push(radius * dirs[y][j] + normal.sample(&mut rng));
        }
    }
    let features = Matrix::from_vec(n, d, data)?;
    let (train_idx, val_idx, test_idx) = split_indices(n, seed);
    let ds = Dataset {
        features,
        labels,
        n_classes,
        train_idx,
        val_idx,
        test_idx,
    };
    ds.validate()?;
    Ok(ds)
}

/// Mutually orthonormal length-`d` direction vectors by Gram-Schmidt
/// on Gaussian draws; degenerate draws are rejected and retried.
fn orthonormal_directions(
    d: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while dirs.len() < k {
        attempts += 1;
        if attempts > 100 * k {
            return Err(Error::contract(
                "failed to draw independent directions".to_string(),
            ));
        }
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        for u in &dirs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for vi in &mut v {
                *vi /= norm;
            }
            dirs.push(v);
        }
    }
    Ok(dirs)
}

/// Teacher-labeled task whose signal sits in one layer: the teacher is
/// the base model with a rank-`perturb_rank` delta added to exactly
/// `layer`'s weight. The delta damps the layer's action on a random
/// `perturb_rank`-dimensional output subspace (delta = -s.W.P.P^T for
/// orthonormal P and s = PERTURB_SCALE), so the teacher weakens
/// directions the base layer transmits. Labels are the teacher's argmax
/// predictions on Gaussian inputs. `perturb_rank` 0 is the null task:
/// the teacher equals the base model.
pub fn gen_layer_concentrated_task(
    base: &Model,
    layer: usize,
    perturb_rank: usize,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    let n_classes = base.n_classes();
    check_population(n, n_classes)?;
    if layer >= base.layers.len() {
        return Err(Error::contract(format!(
            "layer {layer} out of range for {} layers",
            base.layers.len()
        )));
    }
    if base.adapters.is_some() || base.bottlenecks.is_some() {
        return Err(Error::contract(
            "teacher base must be a bare model".to_string(),
        ));
    }
    let spec = &base.layers[layer];
    let max_rank = spec.d_in().min(spec.d_out());
    if perturb_rank > max_rank {
        return Err(Error::contract(format!(
            "perturb_rank {perturb_rank} exceeds max rank {max_rank} of layer {layer}"
        )));
    }

    let mut rng = rng_for(seed, stream::TEACHER);
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut teacher = base.clone();
    if perturb_rank > 0 {
        let dirs = orthonormal_directions(spec.d_out(), perturb_rank, &mut rng)?;
        let p = Matrix::from_fn(spec.d_out(), perturb_rank, |i, j| dirs[j][i]);
        let delta = spec
            .weight
            .matmul(&p)?
            .matmul(&p.transpose())?
            .scale(-PERTURB_SCALE);
        teacher.layers[layer].weight = spec.weight.add(&delta)?;
    }

    let d = base.input_dim();
    let features = Matrix::from_fn(n, d, |_, _| normal.sample(&mut rng));
    let logits = teacher.forward(&features)?.logits;
    let labels: Vec<usize> = (0..n).map(|i| argmax(logits.row(i))).collect();

    let (train_idx, val_idx, test_idx) = split_indices(n, seed);
    let ds = Dataset {
        features,
        labels,
        n_classes,
        train_idx,
        val_idx,
        test_idx,
    };
    ds.validate()?;
    Ok(ds)
}

/// Load a dataset from CSV with header f0..f{d-1},label. Labels must be
/// integers below n_classes and features finite; errors carry the 1-based
/// line number.
pub fn load_csv_dataset(path: &Path, n_classes: usize, seed: u64) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::contract(format!(
            "need at least 2 classes, got {n_classes}"
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut records = reader.records();

    let header = match records.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".to_string(),
            })
        }
        Some(r) => r?,
    };
    let cols = header.len();
    if cols < 2 || header.get(cols - 1) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be f0..f{d-1},label".to_string(),
        });
    }
    let d = cols - 1;
    for (i, name) in header.iter().take(d).enumerate() {
        if name != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("feature column {i} must be named f{i}, got {name:?}"),
            });
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != cols {
            return Err(Error::Parse {
                line,
                msg: format!("expected {cols} fields, got {}", rec.len()),
            });
        }
        for j in 0..d {
            let raw = rec.get(j).expect("length checked");
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("field f{j}: {raw:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("field f{j}: non-finite value {raw:?}"),
                });
            }
            data.push(v);
        }
        let raw = rec.get(d).expect("length checked");
        let y: usize = raw.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("label {raw:?} is not a non-negative integer"),
        })?;
        if y >= n_classes {
            return Err(Error::Parse {
                line,
                msg: format!("label {y} out of range for {n_classes} classes"),
            });
        }
        labels.push(y);
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows after the header".to_string(),
        });
    }
    if n * 15 / 100 == 0 {
        return Err(Error::contract(format!(
            "{n} rows is too small for a 70/15/15 split"
        )));
    }
    let features = Matrix::from_vec(n, d, data)?;
    let (train_idx, val_idx, test_idx) = split_indices(n, seed);
    let ds = Dataset {
        features,
        labels,
        n_classes,
        train_idx,
        val_idx,
        test_idx,
    };
    ds.validate()?;
    Ok(ds)
}
