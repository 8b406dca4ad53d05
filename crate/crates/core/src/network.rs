//! The base network: a stack of tanh layers with a linear softmax head.
//!
//! A `Model` owns its frozen-or-trainable status only implicitly, through
//! the strategy tag set by [`crate::strategy::apply_strategy`]; the trainer
//! consults the tag to decide which parameters move. Layer l computes
//! tanh(h * W_eff_l + b_l) where W_eff_l folds in the layer's low-rank
//! adapter when one is installed. The head applies no activation.
//!
//! `forward` and `trace` run the same kernels in the same order, so an
//! untraced evaluation pass is bit-identical to the values recorded on the
//! tape during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::matrix::Matrix;
use crate::rng::{rng_for, stream};
use crate::strategy::{BottleneckAdapter, ParamKey, StrategyTag};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub weight: Matrix,
    /// Row vector, 1 x d_out.
    pub bias: Matrix,
}

impl LayerSpec {
    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub layers: Vec<LayerSpec>,
    pub head: LayerSpec,
    /// One adapter per body layer when a LoRA strategy is applied.
    pub adapters: Option<Vec<LoraAdapter>>,
    /// One bottleneck per body layer when the adapter strategy is applied.
    pub bottlenecks: Option<Vec<BottleneckAdapter>>,
    pub strategy: StrategyTag,
}

/// Result of an untraced forward pass.
pub struct ForwardPass {
    pub logits: Matrix,
    /// Input to each body layer; activations[0] is the batch itself.
    pub activations: Vec<Matrix>,
}

/// Node handles from a traced forward pass.
pub struct Trace {
    pub logits: NodeId,
    /// Input node of each body layer.
    pub activations: Vec<NodeId>,
    /// Effective weight node of each body layer (the base weight node for
    /// strategies without adapters).
    pub eff_weights: Vec<NodeId>,
    /// Every parameter leaf in canonical order.
    pub params: Vec<(ParamKey, NodeId)>,
}

/// Glorot-uniform initialized model with zero biases and no add-ons.
pub fn init_model(dims: &[usize], n_classes: usize, seed: u64) -> Result<Model> {
    if dims.len() < 2 {
        return Err(Error::contract(
            "dims must list the input width and at least one layer width".to_string(),
        ));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::contract("zero layer width".to_string()));
    }
    if n_classes < 2 {
        return Err(Error::contract(format!(
            "need at least 2 classes, got {n_classes}"
        )));
    }
    let mut rng = rng_for(seed, stream::MODEL_INIT);
    let mut glorot = |d_in: usize, d_out: usize| {
        let s = (6.0 / (d_in + d_out) as f64).sqrt();
        LayerSpec {
            weight: Matrix::from_fn(d_in, d_out, |_, _| rng.gen_range(-s..s)),
            bias: Matrix::zeros(1, d_out),
        }
    };
    let layers: Vec<LayerSpec> = dims.windows(2).map(|w| glorot(w[0], w[1])).collect();
    let head = glorot(dims[dims.len() - 1], n_classes);
    Ok(Model {
        layers,
        head,
        adapters: None,
        bottlenecks: None,
        strategy: StrategyTag::FeatureExtraction,
    })
}

impl Model {
    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn n_classes(&self) -> usize {
        self.head.d_out()
    }

    /// Layer widths [d_0, ..., d_L], input first, head excluded.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layers.iter().map(|l| l.d_in()).collect();
        dims.push(self.layers[self.layers.len() - 1].d_out());
        dims
    }

    /// Base weight plus the alpha-scaled adapter delta, when one applies.
    pub fn effective_weight(&self, layer: usize) -> Result<Matrix> {
        if layer >= self.layers.len() {
            return Err(Error::contract(format!(
                "layer {layer} out of range for {} layers",
                self.layers.len()
            )));
        }
        let base = &self.layers[layer].weight;
        match (&self.adapters, self.strategy.uses_lora()) {
            (Some(ads), true) => ads[layer].merge_into(base),
            _ => Ok(base.clone()),
        }
    }

    /// Adapter ranks per layer; empty when no adapters are installed.
    pub fn ranks(&self) -> Vec<usize> {
        self.adapters
            .as_ref()
            .map(|ads| ads.iter().map(|a| a.rank()).collect())
            .unwrap_or_default()
    }

    /// Allocation weights per layer; empty when no adapters are installed.
    pub fn alphas(&self) -> Vec<f64> {
        self.adapters
            .as_ref()
            .map(|ads| ads.iter().map(|a| a.alpha()).collect())
            .unwrap_or_default()
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward",
                left_rows: x.rows(),
                left_cols: x.cols(),
                right_rows: self.input_dim(),
                right_cols: self.layers[0].d_out(),
            });
        }
        let mut h = x.clone();
        let mut activations = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            activations.push(h.clone());
            let eff = self.effective_weight(l)?;
            let z = h.matmul(&eff)?.add_row_broadcast(&layer.bias)?;
            let mut out = z.map(f64::tanh);
            if let (Some(bots), true) = (&self.bottlenecks, self.strategy.uses_bottleneck()) {
                let mid = out.matmul(&bots[l].down)?.map(f64::tanh);
                out = out.add(&mid.matmul(&bots[l].up)?)?;
            }
            h = out;
        }
        let logits = h
            .matmul(&self.head.weight)?
            .add_row_broadcast(&self.head.bias)?;
        Ok(ForwardPass {
            logits,
            activations,
        })
    }

    /// Forward pass recorded on a tape. Mirrors `forward` op for op.
    pub fn trace(&self, tape: &mut Tape, x: &Matrix) -> Result<Trace> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "trace",
                left_rows: x.rows(),
                left_cols: x.cols(),
                right_rows: self.input_dim(),
                right_cols: self.layers[0].d_out(),
            });
        }
        let mut params = Vec::new();
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut eff_weights = Vec::with_capacity(self.layers.len());
        let mut h = tape.leaf(x.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            activations.push(h);
            let w = tape.leaf(layer.weight.clone());
            params.push((ParamKey::LayerWeight(l), w));
            let b = tape.leaf(layer.bias.clone());
            params.push((ParamKey::LayerBias(l), b));
            let eff = match (&self.adapters, self.strategy.uses_lora()) {
                (Some(ads), true) => {
                    let a = tape.leaf(ads[l].a().clone());
                    params.push((ParamKey::AdapterA(l), a));
                    let bm = tape.leaf(ads[l].b().clone());
                    params.push((ParamKey::AdapterB(l), bm));
                    let delta = tape.matmul(a, bm)?;
                    let scaled = tape.scalar_mul(ads[l].alpha(), delta);
                    tape.add(w, scaled)?
                }
                _ => w,
            };
            eff_weights.push(eff);
            let z = tape.matmul(h, eff)?;
            let z = tape.add_row(z, b)?;
            let mut out = tape.tanh(z);
            if let (Some(bots), true) = (&self.bottlenecks, self.strategy.uses_bottleneck()) {
                let down = tape.leaf(bots[l].down.clone());
                params.push((ParamKey::BottleneckDown(l), down));
                let up = tape.leaf(bots[l].up.clone());
                params.push((ParamKey::BottleneckUp(l), up));
                let mid = tape.matmul(out, down)?;
                let mid = tape.tanh(mid);
                let res = tape.matmul(mid, up)?;
                out = tape.add(out, res)?;
            }
            h = out;
        }
        let hw = tape.leaf(self.head.weight.clone());
        params.push((ParamKey::HeadWeight, hw));
        let hb = tape.leaf(self.head.bias.clone());
        params.push((ParamKey::HeadBias, hb));
        let z = tape.matmul(h, hw)?;
        let logits = tape.add_row(z, hb)?;
        Ok(Trace {
            logits,
            activations,
            eff_weights,
            params,
        })
    }

    /// Structural consistency, used after deserializing a checkpoint.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("model has no layers".to_string()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.bias.shape() != (1, layer.d_out()) {
                return Err(Error::contract(format!(
                    "layer {l} bias shape {:?} does not match width {}",
                    layer.bias.shape(),
                    layer.d_out()
                )));
            }
            if l + 1 < self.layers.len() && layer.d_out() != self.layers[l + 1].d_in() {
                return Err(Error::contract(format!(
                    "layer {l} output width {} does not feed layer {} input width {}",
                    layer.d_out(),
                    l + 1,
                    self.layers[l + 1].d_in()
                )));
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(Error::contract(format!("non-finite entries in layer {l}")));
            }
        }
        let last = self.layers[self.layers.len() - 1].d_out();
        if self.head.d_in() != last {
            return Err(Error::contract(format!(
                "head input width {} does not match last layer width {last}",
                self.head.d_in()
            )));
        }
        if self.head.bias.shape() != (1, self.head.d_out()) || self.n_classes() < 2 {
            return Err(Error::contract("malformed head".to_string()));
        }
        if self.strategy.uses_lora() != self.adapters.is_some() {
            return Err(Error::contract(format!(
                "strategy {} inconsistent with adapter slots",
                self.strategy
            )));
        }
        if self.strategy.uses_bottleneck() != self.bottlenecks.is_some() {
            return Err(Error::contract(format!(
                "strategy {} inconsistent with bottleneck slots",
                self.strategy
            )));
        }
        if let Some(ads) = &self.adapters {
            if ads.len() != self.layers.len() {
                return Err(Error::contract("adapter count != layer count".to_string()));
            }
            for (l, ad) in ads.iter().enumerate() {
                ad.validate()?;
                if (ad.d_in(), ad.d_out()) != (self.layers[l].d_in(), self.layers[l].d_out()) {
                    return Err(Error::contract(format!(
                        "adapter {l} shape does not match its layer"
                    )));
                }
            }
        }
        if let Some(bots) = &self.bottlenecks {
            if bots.len() != self.layers.len() {
                return Err(Error::contract(
                    "bottleneck count != layer count".to_string(),
                ));
            }
            for (l, bot) in bots.iter().enumerate() {
                bot.validate()?;
                if bot.width() != self.layers[l].d_out() {
                    return Err(Error::contract(format!(
                        "bottleneck {l} width does not match its layer"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::{apply_strategy, StrategyTag};
    use crate::train::TrainConfig;

    fn small_model(seed: u64) -> Model {
        init_model(&[5, 6, 4], 3, seed).unwrap()
    }

    fn batch(rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |r, c| ((r * cols + c) as f64 * 0.37).sin())
    }

    #[test]
    fn init_shapes_and_bounds() {
        let m = small_model(1);
        assert_eq!(m.layers.len(), 2);
        assert_eq!(m.layers[0].weight.shape(), (5, 6));
        assert_eq!(m.layers[1].weight.shape(), (6, 4));
        assert_eq!(m.head.weight.shape(), (4, 3));
        assert_eq!(m.dims(), vec![5, 6, 4]);
        assert_eq!(m.n_classes(), 3);
        for layer in m.layers.iter().chain(std::iter::once(&m.head)) {
            let s = (6.0 / (layer.d_in() + layer.d_out()) as f64).sqrt();
            assert!(layer.weight.data().iter().all(|v| v.abs() < s));
            assert!(layer.bias.data().iter().all(|&v| v == 0.0));
            // The draw actually spreads over the interval.
            assert!(layer.weight.data().iter().any(|v| v.abs() > s * 0.5));
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        assert_eq!(small_model(3), small_model(3));
        assert_ne!(small_model(3), small_model(4));
    }

    #[test]
    fn init_rejects_degenerate_shapes() {
        assert!(init_model(&[5], 3, 0).is_err());
        assert!(init_model(&[5, 0], 3, 0).is_err());
        assert!(init_model(&[5, 4], 1, 0).is_err());
    }

    #[test]
    fn forward_shapes_and_activation_chain() {
        let m = small_model(5);
        let x = batch(7, 5);
        let pass = m.forward(&x).unwrap();
        assert_eq!(pass.logits.shape(), (7, 3));
        assert_eq!(pass.activations.len(), 2);
        assert_eq!(pass.activations[0], x);
        assert_eq!(pass.activations[1].shape(), (7, 6));
        assert!(pass.logits.is_finite());
        // Hidden activations ran through tanh; the head did not.
        assert!(pass.activations[1].data().iter().all(|v| v.abs() <= 1.0));
        assert!(m.forward(&batch(7, 4)).is_err());
    }

    #[test]
    fn head_is_linear() {
        // Scale the head weight; logits must scale linearly with it.
        let mut m = small_model(6);
        let x = batch(3, 5);
        let base = m.forward(&x).unwrap().logits;
        m.head.weight = m.head.weight.scale(10.0);
        let scaled = m.forward(&x).unwrap().logits;
        // bias is zero, so the ratio is exactly 10 where base is nonzero.
        for (a, b) in base.data().iter().zip(scaled.data()) {
            if a.abs() > 1e-12 {
                assert!((b / a - 10.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn traced_and_untraced_forward_are_bit_identical() {
        for tag in [
            StrategyTag::Full,
            StrategyTag::Adapter,
            StrategyTag::LoraStatic,
        ] {
            let mut cfg = TrainConfig::default();
            cfg.schedule.lambda_adjust = 0.0;
            let m = apply_strategy(small_model(7), tag, &cfg).unwrap();
            let x = batch(6, 5);
            let pass = m.forward(&x).unwrap();
            let mut tape = Tape::new();
            let trace = m.trace(&mut tape, &x).unwrap();
            assert_eq!(
                pass.logits.data(),
                tape.value(trace.logits).data(),
                "divergence under {tag}"
            );
            for (l, id) in trace.activations.iter().enumerate() {
                assert_eq!(pass.activations[l].data(), tape.value(*id).data());
            }
        }
    }

    #[test]
    fn effective_weight_folds_adapter_only_for_lora() {
        let cfg = TrainConfig::default();
        let m = apply_strategy(small_model(8), StrategyTag::LoraStatic, &cfg).unwrap();
        // Fresh adapters have B = 0, so effective == base.
        for l in 0..m.layers.len() {
            assert_eq!(
                m.effective_weight(l)
                    .unwrap()
                    .max_abs_diff(&m.layers[l].weight)
                    .unwrap(),
                0.0
            );
        }
        // Push B off zero: effective weight must move with it.
        let mut m = m;
        let ads = m.adapters.as_mut().unwrap();
        for v in ads[0].b_mut().data_mut() {
            *v = 0.3;
        }
        let eff = m.effective_weight(0).unwrap();
        let want = m.adapters.as_ref().unwrap()[0]
            .merge_into(&m.layers[0].weight)
            .unwrap();
        assert_eq!(eff.max_abs_diff(&want).unwrap(), 0.0);
        assert!(m.effective_weight(2).is_err());
    }

    #[test]
    fn merged_model_matches_adapter_forward() {
        // Folding every adapter into its base weight and dropping the slots
        // must give identical logits.
        let cfg = TrainConfig::default();
        let mut m = apply_strategy(small_model(9), StrategyTag::LoraStatic, &cfg).unwrap();
        for ad in m.adapters.as_mut().unwrap() {
            for (i, v) in ad.b_mut().data_mut().iter_mut().enumerate() {
                *v = 0.05 * (i as f64 - 3.0);
            }
            ad.set_alpha(0.6).unwrap();
        }
        let x = batch(5, 5);
        let with_slots = m.forward(&x).unwrap().logits;

        let mut merged = m.clone();
        for l in 0..merged.layers.len() {
            merged.layers[l].weight = m.effective_weight(l).unwrap();
        }
        merged.adapters = None;
        merged.strategy = StrategyTag::Full;
        let folded = merged.forward(&x).unwrap().logits;
        assert_eq!(with_slots.max_abs_diff(&folded).unwrap(), 0.0);
    }

    #[test]
    fn validate_catches_tampering() {
        let m = small_model(10);
        assert!(m.validate().is_ok());
        let mut bad = m.clone();
        bad.head.weight = Matrix::zeros(9, 3);
        assert!(bad.validate().is_err());
        let mut bad = m.clone();
        bad.strategy = StrategyTag::LoraStatic;
        assert!(bad.validate().is_err());
        let mut bad = m;
        bad.layers[0].bias = Matrix::zeros(1, 9);
        assert!(bad.validate().is_err());
    }
}
