//! The training loop.
//!
//! One optimizer (SGD with momentum) drives every strategy; what differs
//! is which parameters it may touch. Each batch builds a fresh tape,
//! computes task loss plus the adapter regularizers, and steps the
//! trainable parameters. Under the dynamic strategy, effective-weight
//! gradients and input variances are accumulated across the epoch and
//! spent at epoch boundaries on an importance refresh and a rank update.
//!
//! Reported epoch losses are exact sample-weighted means over the epoch's
//! batches, so a re-run with the same config reproduces them bit for bit.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::importance::refresh_importance;
use crate::matrix::Matrix;
use crate::metrics::{argmax, evaluate, MetricReport};
use crate::network::Model;
use crate::rank::{update_ranks, RankChange, RankSchedule};
use crate::rng::{mix, rng_for, stream};
use crate::strategy::{
    body_param_ratio, is_trainable, total_param_count, trainable_param_count, ParamKey,
    StrategyTag,
};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty on adapter A factors.
    pub lambda1: f64,
    /// L2 penalty on adapter B factors.
    pub lambda2: f64,
    pub schedule: RankSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            lambda1: 1e-4,
            lambda2: 1e-4,
            schedule: RankSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1".to_string()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        self.schedule.validate()
    }
}

/// Mean softmax cross-entropy of logits against labels.
pub fn task_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let id = tape.leaf(logits.clone());
    let loss = tape.softmax_cross_entropy(id, labels)?;
    Ok(tape.value(loss).get(0, 0))
}

/// Task loss plus the adapter regularizers. For strategies without
/// adapters this is the task loss unchanged; with both lambdas zero it
/// equals the task loss exactly.
pub fn total_loss(task: f64, model: &Model, lambda1: f64, lambda2: f64) -> Result<f64> {
    for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::contract(format!(
                "{name} must be finite and non-negative, got {v}"
            )));
        }
    }
    let Some(ads) = model
        .strategy
        .uses_lora()
        .then_some(model.adapters.as_ref())
        .flatten()
    else {
        return Ok(task);
    };
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    for ad in ads {
        sum_a += ad.a().frobenius_norm_sq();
        sum_b += ad.b().frobenius_norm_sq();
    }
    Ok(task + lambda1 * sum_a + lambda2 * sum_b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub total_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// Adapter state after any refresh this epoch; empty for non-LoRA
    /// strategies. Gamma holds the most recent importances (zeros before
    /// the first refresh).
    pub ranks: Vec<usize>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// One importance-and-rank refresh, as logged to the alpha trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshEvent {
    pub epoch: usize,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub variances: Vec<f64>,
    pub ranks: Vec<usize>,
    pub changes: Vec<RankChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: StrategyTag,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub refreshes: Vec<RefreshEvent>,
    pub test: MetricReport,
    pub trainable_params: usize,
    pub total_params: usize,
    /// Trainable body weights over total body weights at the start.
    pub param_ratio: f64,
    /// Peak of the same ratio over the run (rank growth can raise it).
    pub max_param_ratio: f64,
    pub train_seconds: f64,
}

impl RunRecord {
    pub fn final_epoch(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }
}

/// SGD with classical momentum, keyed by parameter identity so buffers
/// can be dropped when an adapter changes shape.
struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: HashMap<ParamKey, Matrix>,
}

impl Sgd {
    fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    fn step(&mut self, key: ParamKey, param: &mut Matrix, grad: Option<&Matrix>) -> Result<()> {
        let v = self
            .velocity
            .entry(key)
            .or_insert_with(|| Matrix::zeros(param.rows(), param.cols()));
        if v.shape() != param.shape() {
            return Err(Error::contract(format!(
                "stale velocity buffer for {key:?}; reset after resizing"
            )));
        }
        match grad {
            Some(g) => {
                if g.shape() != param.shape() {
                    return Err(Error::contract(format!(
                        "gradient shape mismatch for {key:?}"
                    )));
                }
                for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                    *vi = self.momentum * *vi + gi;
                }
            }
            None => {
                for vi in v.data_mut().iter_mut() {
                    *vi *= self.momentum;
                }
            }
        }
        for (p, vi) in param.data_mut().iter_mut().zip(v.data()) {
            *p -= self.lr * vi;
        }
        Ok(())
    }

    fn reset(&mut self, key: ParamKey) {
        self.velocity.remove(&key);
    }
}

fn param_mut(model: &mut Model, key: ParamKey) -> &mut Matrix {
    match key {
        ParamKey::LayerWeight(l) => &mut model.layers[l].weight,
        ParamKey::LayerBias(l) => &mut model.layers[l].bias,
        ParamKey::AdapterA(l) => model.adapters.as_mut().expect("adapters present")[l].a_mut(),
        ParamKey::AdapterB(l) => model.adapters.as_mut().expect("adapters present")[l].b_mut(),
        ParamKey::BottleneckDown(l) => {
            &mut model.bottlenecks.as_mut().expect("bottlenecks present")[l].down
        }
        ParamKey::BottleneckUp(l) => {
            &mut model.bottlenecks.as_mut().expect("bottlenecks present")[l].up
        }
        ParamKey::HeadWeight => &mut model.head.weight,
        ParamKey::HeadBias => &mut model.head.bias,
    }
}

/// Regularized loss on the tape: task + lambda1 * sum ||A||^2 + lambda2 *
/// sum ||B||^2, using the adapter leaves already traced. Strategies
/// without adapters return the task node unchanged.
fn total_loss_node(
    tape: &mut Tape,
    task: NodeId,
    params: &[(ParamKey, NodeId)],
    model: &Model,
    cfg: &TrainConfig,
) -> Result<NodeId> {
    if !model.strategy.uses_lora() {
        return Ok(task);
    }
    let mut sum_a: Option<NodeId> = None;
    let mut sum_b: Option<NodeId> = None;
    for (key, node) in params {
        let target = match key {
            ParamKey::AdapterA(_) => &mut sum_a,
            ParamKey::AdapterB(_) => &mut sum_b,
            _ => continue,
        };
        let sq = tape.frobenius_norm_sq(*node);
        *target = Some(match target.take() {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    let (Some(sum_a), Some(sum_b)) = (sum_a, sum_b) else {
        return Err(Error::contract(
            "LoRA strategy with no adapter leaves on the tape".to_string(),
        ));
    };
    let reg_a = tape.scalar_mul(cfg.lambda1, sum_a);
    let reg_b = tape.scalar_mul(cfg.lambda2, sum_b);
    let with_a = tape.add(task, reg_a)?;
    tape.add(with_a, reg_b)
}

/// Regularized loss and its gradients for one batch, computed exactly as
/// the training loop computes them. The map holds one gradient per
/// trainable parameter under the model's strategy.
pub fn loss_gradients(
    model: &Model,
    x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, HashMap<ParamKey, Matrix>)> {
    let mut tape = Tape::new();
    let trace = model.trace(&mut tape, x)?;
    let task = tape.softmax_cross_entropy(trace.logits, labels)?;
    let total = total_loss_node(&mut tape, task, &trace.params, model, cfg)?;
    let grads = tape.backward(total)?;
    let mut out = HashMap::new();
    for (key, node) in &trace.params {
        if is_trainable(model.strategy, *key) {
            if let Some(g) = grads.get(*node) {
                out.insert(*key, g.clone());
            }
        }
    }
    Ok((tape.value(total).get(0, 0), out))
}

fn split_accuracy(model: &Model, data: &Dataset, idx: &[usize]) -> Result<f64> {
    let x = data.features.select_rows(idx)?;
    let logits = model.forward(&x)?.logits;
    let labels = data.labels_for(idx);
    let correct = (0..idx.len())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    Ok(correct as f64 / idx.len() as f64)
}

/// Full evaluation of a model on one split of a dataset.
pub fn evaluate_split(model: &Model, data: &Dataset, idx: &[usize]) -> Result<MetricReport> {
    let x = data.features.select_rows(idx)?;
    let logits = model.forward(&x)?.logits;
    evaluate(&logits, &data.labels_for(idx))
}

fn check_model_against(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    data.validate()?;
    if data.dim() != model.input_dim() {
        return Err(Error::contract(format!(
            "dataset dimension {} does not match model input width {}",
            data.dim(),
            model.input_dim()
        )));
    }
    if data.n_classes != model.n_classes() {
        return Err(Error::contract(format!(
            "dataset has {} classes but the model head has {}",
            data.n_classes,
            model.n_classes()
        )));
    }
    if model.strategy.uses_lora() && model.adapters.is_none() {
        return Err(Error::contract(
            "LoRA strategy without adapters; call apply_strategy first".to_string(),
        ));
    }
    if model.strategy.uses_bottleneck() && model.bottlenecks.is_none() {
        return Err(Error::contract(
            "adapter strategy without bottlenecks; call apply_strategy first".to_string(),
        ));
    }
    Ok(())
}

/// Train the model in place and report the full run history.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<RunRecord> {
    check_model_against(model, data, cfg)?;
    let started = Instant::now();
    let n_layers = model.layers.len();
    let dynamic = model.strategy == StrategyTag::LoraDynamic;
    let mut shuffle_rng = rng_for(cfg.seed, stream::SHUFFLE);
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);

    let trainable_params = trainable_param_count(model);
    let total_params = total_param_count(model);
    let param_ratio = body_param_ratio(model);
    let mut max_param_ratio = param_ratio;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut refreshes = Vec::new();
    let mut last_gamma = if model.adapters.is_some() {
        vec![0.0; n_layers]
    } else {
        Vec::new()
    };

    for epoch in 0..cfg.epochs {
        let mut order = data.train_idx.clone();
        order.shuffle(&mut shuffle_rng);

        let mut task_sum = 0.0;
        let mut total_sum = 0.0;
        let mut grad_accum: Vec<Matrix> = Vec::new();
        let mut var_accum = vec![0.0; n_layers];
        let mut n_batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let x = data.features.select_rows(chunk)?;
            let labels = data.labels_for(chunk);
            let mut tape = Tape::new();
            let trace = model.trace(&mut tape, &x)?;
            let task = tape.softmax_cross_entropy(trace.logits, &labels)?;
            let total = total_loss_node(&mut tape, task, &trace.params, model, cfg)?;
            let grads = tape.backward(total)?;

            let w = chunk.len() as f64;
            task_sum += tape.value(task).get(0, 0) * w;
            total_sum += tape.value(total).get(0, 0) * w;

            if dynamic {
                for l in 0..n_layers {
                    let g = grads.get(trace.eff_weights[l]).ok_or_else(|| {
                        Error::contract(format!("no gradient reached layer {l}"))
                    })?;
                    match grad_accum.get_mut(l) {
                        Some(acc) => *acc = acc.add(g)?,
                        None => grad_accum.push(g.clone()),
                    }
                    var_accum[l] += tape.value(trace.activations[l]).batch_variance()?;
                }
                n_batches += 1;
            }

            for (key, node) in &trace.params {
                if is_trainable(model.strategy, *key) {
                    let grad = grads.get(*node);
                    // Borrow dance: clone the small gradient so the tape
                    // borrow ends before the model is mutated.
                    let grad = grad.cloned();
                    sgd.step(*key, param_mut(model, *key), grad.as_ref())?;
                }
            }
        }

        let n_train = order.len() as f64;
        let task_mean = task_sum / n_train;
        let total_mean = total_sum / n_train;
        if !task_mean.is_finite() {
            return Err(Error::contract(format!(
                "training diverged at epoch {epoch} (loss {task_mean})"
            )));
        }

        // Epochs are recorded 0-based; a cadence of k fires after the
        // k-th pass, so the gate counts completed epochs.
        if dynamic && (epoch + 1) % cfg.schedule.refresh_every == 0 {
            let inv = 1.0 / n_batches as f64;
            let mean_grads: Vec<Matrix> = grad_accum.iter().map(|g| g.scale(inv)).collect();
            let state = refresh_importance(model, &mean_grads, epoch)?;
            let mean_vars: Vec<f64> = var_accum.iter().map(|v| v * inv).collect();
            let changes = update_ranks(
                model,
                &cfg.schedule,
                &mean_vars,
                mix(cfg.seed, stream::RESIZE + epoch as u64),
            )?;
            for ch in &changes {
                sgd.reset(ParamKey::AdapterA(ch.layer));
                sgd.reset(ParamKey::AdapterB(ch.layer));
            }
            max_param_ratio = max_param_ratio.max(body_param_ratio(model));
            last_gamma = state.gamma.clone();
            refreshes.push(RefreshEvent {
                epoch,
                gamma: state.gamma,
                alpha: state.alpha,
                variances: mean_vars,
                ranks: model.ranks(),
                changes,
            });
        }

        epochs.push(EpochRecord {
            epoch,
            task_loss: task_mean,
            total_loss: total_mean,
            train_accuracy: split_accuracy(model, data, &data.train_idx)?,
            val_accuracy: split_accuracy(model, data, &data.val_idx)?,
            ranks: model.ranks(),
            alpha: model.alphas(),
            gamma: last_gamma.clone(),
        });
    }

    let test = evaluate_split(model, data, &data.test_idx)?;
    Ok(RunRecord {
        strategy: model.strategy,
        seed: cfg.seed,
        epochs,
        refreshes,
        test,
        trainable_params,
        total_params,
        param_ratio,
        max_param_ratio,
        train_seconds: started.elapsed().as_secs_f64(),
    })
}
