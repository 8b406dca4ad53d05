//! Fine-tuning strategies and parameter accounting.
//!
//! A strategy decides which parameters the optimizer may touch and which
//! add-on modules get installed. The head is trainable under every
//! strategy; what varies is how the body is adapted.
//!
//! Parameter ratios reported here count body weight matrices only: base
//! weights for `full`, adapter factors for the LoRA strategies, bottleneck
//! projections for `adapter`. Biases and the head are excluded from both
//! numerator and denominator, since every strategy trains them and they
//! would only blur the comparison the ratio exists to make. Absolute
//! trainable counts (which do include biases and the head) are reported
//! separately.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, INIT_STD};
use crate::matrix::Matrix;
use crate::network::Model;
use crate::rng::{mix, stream};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyTag {
    Full,
    FeatureExtraction,
    Adapter,
    Bitfit,
    LoraStatic,
    LoraDynamic,
}

impl StrategyTag {
    pub const ALL: [StrategyTag; 6] = [
        StrategyTag::Full,
        StrategyTag::FeatureExtraction,
        StrategyTag::Adapter,
        StrategyTag::Bitfit,
        StrategyTag::LoraStatic,
        StrategyTag::LoraDynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyTag::Full => "full",
            StrategyTag::FeatureExtraction => "feature_extraction",
            StrategyTag::Adapter => "adapter",
            StrategyTag::Bitfit => "bitfit",
            StrategyTag::LoraStatic => "lora_static",
            StrategyTag::LoraDynamic => "lora_dynamic",
        }
    }

    pub fn uses_lora(self) -> bool {
        matches!(self, StrategyTag::LoraStatic | StrategyTag::LoraDynamic)
    }

    pub fn uses_bottleneck(self) -> bool {
        self == StrategyTag::Adapter
    }
}

impl fmt::Display for StrategyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown strategy {s:?}; expected one of full, feature_extraction, \
                     adapter, bitfit, lora_static, lora_dynamic"
                ))
            })
    }
}

/// Residual bottleneck: h + tanh(h * down) * up, with up zero-initialized
/// so a fresh bottleneck is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckAdapter {
    pub down: Matrix,
    pub up: Matrix,
}

/// Bottleneck width divisor: m = ceil(d / 4).
pub const BOTTLENECK_DIVISOR: usize = 4;

impl BottleneckAdapter {
    pub fn init(d: usize, seed: u64) -> Self {
        let m = d.div_ceil(BOTTLENECK_DIVISOR);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        BottleneckAdapter {
            down: Matrix::from_fn(d, m, |_, _| normal.sample(&mut rng)),
            up: Matrix::zeros(m, d),
        }
    }

    /// The layer width this bottleneck sits on.
    pub fn width(&self) -> usize {
        self.down.rows()
    }

    pub fn hidden(&self) -> usize {
        self.down.cols()
    }

    pub fn param_count(&self) -> usize {
        2 * self.width() * self.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        if self.up.shape() != (self.hidden(), self.width()) {
            return Err(Error::contract(format!(
                "bottleneck shapes inconsistent: down {:?}, up {:?}",
                self.down.shape(),
                self.up.shape()
            )));
        }
        if !self.down.is_finite() || !self.up.is_finite() {
            return Err(Error::contract("non-finite bottleneck entries".to_string()));
        }
        Ok(())
    }
}

/// Identity of one parameter matrix within a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKey {
    LayerWeight(usize),
    LayerBias(usize),
    AdapterA(usize),
    AdapterB(usize),
    BottleneckDown(usize),
    BottleneckUp(usize),
    HeadWeight,
    HeadBias,
}

/// Whether the optimizer may update this parameter under this strategy.
pub fn is_trainable(tag: StrategyTag, key: ParamKey) -> bool {
    use ParamKey::*;
    match key {
        HeadWeight | HeadBias => true,
        LayerWeight(_) => tag == StrategyTag::Full,
        LayerBias(_) => matches!(tag, StrategyTag::Full | StrategyTag::Bitfit),
        AdapterA(_) | AdapterB(_) => tag.uses_lora(),
        BottleneckDown(_) | BottleneckUp(_) => tag.uses_bottleneck(),
    }
}

/// Install the modules a strategy needs and stamp the model with the tag.
/// The model must be fresh: applying two strategies to one model is a
/// contract violation, not a reconfiguration.
pub fn apply_strategy(mut model: Model, tag: StrategyTag, cfg: &TrainConfig) -> Result<Model> {
    if model.adapters.is_some() || model.bottlenecks.is_some() {
        return Err(Error::contract(
            "apply_strategy requires a fresh model; one was already applied".to_string(),
        ));
    }
    if !tag.uses_lora() && cfg.schedule.lambda_adjust != 0.0 {
        return Err(Error::config(format!(
            "rank schedule (lambda_adjust = {}) is meaningful only for LoRA \
             strategies, not {tag}",
            cfg.schedule.lambda_adjust
        )));
    }
    if tag.uses_lora() {
        let r = cfg.schedule.r_base;
        let mut adapters = Vec::with_capacity(model.layers.len());
        for (l, layer) in model.layers.iter().enumerate() {
            let max = layer.d_in().min(layer.d_out());
            if r > max {
                return Err(Error::config(format!(
                    "r_base {r} exceeds the max rank {max} of layer {l} \
                     ({}x{})",
                    layer.d_in(),
                    layer.d_out()
                )));
            }
            adapters.push(LoraAdapter::init(
                layer.d_in(),
                layer.d_out(),
                r,
                mix(cfg.seed, stream::ADAPTER_INIT + l as u64),
            )?);
        }
        model.adapters = Some(adapters);
    }
    if tag.uses_bottleneck() {
        let bottlenecks = model
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                BottleneckAdapter::init(
                    layer.d_out(),
                    mix(cfg.seed, stream::BOTTLENECK_INIT + l as u64),
                )
            })
            .collect();
        model.bottlenecks = Some(bottlenecks);
    }
    model.strategy = tag;
    Ok(model)
}

/// Total entries in body base weight matrices (the ratio denominator).
pub fn body_weight_params(model: &Model) -> usize {
    model
        .layers
        .iter()
        .map(|l| l.d_in() * l.d_out())
        .sum()
}

/// Trainable body weight entries under the model's strategy (the ratio
/// numerator): base weights for full, adapter or bottleneck factors for
/// the add-on strategies, zero for head-only and bias-only tuning.
pub fn trainable_body_weight_params(model: &Model) -> usize {
    match model.strategy {
        StrategyTag::Full => body_weight_params(model),
        StrategyTag::FeatureExtraction | StrategyTag::Bitfit => 0,
        StrategyTag::Adapter => model
            .bottlenecks
            .as_ref()
            .map(|b| b.iter().map(|x| x.param_count()).sum())
            .unwrap_or(0),
        StrategyTag::LoraStatic | StrategyTag::LoraDynamic => model
            .adapters
            .as_ref()
            .map(|a| a.iter().map(|x| x.param_count()).sum())
            .unwrap_or(0),
    }
}

/// Trainable body weights over total body weights, in [0, large); 1.0 for
/// full fine-tuning, 2r/d for rank-r LoRA on square d-layers.
pub fn body_param_ratio(model: &Model) -> f64 {
    trainable_body_weight_params(model) as f64 / body_weight_params(model) as f64
}

fn for_each_param(model: &Model, mut f: impl FnMut(ParamKey, usize)) {
    for (l, layer) in model.layers.iter().enumerate() {
        f(ParamKey::LayerWeight(l), layer.weight.data().len());
        f(ParamKey::LayerBias(l), layer.bias.data().len());
    }
    if let Some(ads) = &model.adapters {
        for (l, ad) in ads.iter().enumerate() {
            f(ParamKey::AdapterA(l), ad.a().data().len());
            f(ParamKey::AdapterB(l), ad.b().data().len());
        }
    }
    if let Some(bots) = &model.bottlenecks {
        for (l, bot) in bots.iter().enumerate() {
            f(ParamKey::BottleneckDown(l), bot.down.data().len());
            f(ParamKey::BottleneckUp(l), bot.up.data().len());
        }
    }
    f(ParamKey::HeadWeight, model.head.weight.data().len());
    f(ParamKey::HeadBias, model.head.bias.data().len());
}

/// Absolute count of trainable entries, biases and head included.
pub fn trainable_param_count(model: &Model) -> usize {
    let mut n = 0;
    for_each_param(model, |key, len| {
        if is_trainable(model.strategy, key) {
            n += len;
        }
    });
    n
}

/// Absolute count of all parameter entries present in the model.
pub fn total_param_count(model: &Model) -> usize {
    let mut n = 0;
    for_each_param(model, |_, len| n += len);
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_model;

    fn cfg_with_r(r: usize) -> TrainConfig {
        // Neutral schedule so non-LoRA tags can be applied too.
        let mut cfg = TrainConfig::default();
        cfg.schedule.r_base = r;
        cfg.schedule.lambda_adjust = 0.0;
        cfg
    }

    fn square_model() -> Model {
        // Four 64x64 body layers.
        init_model(&[64, 64, 64, 64, 64], 4, 17).unwrap()
    }

    #[test]
    fn tag_names_round_trip() {
        for tag in StrategyTag::ALL {
            assert_eq!(tag.name().parse::<StrategyTag>().unwrap(), tag);
        }
        assert!("lora".parse::<StrategyTag>().is_err());
    }

    #[test]
    fn apply_installs_the_right_modules() {
        let cfg = cfg_with_r(4);
        for tag in StrategyTag::ALL {
            let m = apply_strategy(square_model(), tag, &cfg).unwrap();
            assert_eq!(m.strategy, tag);
            assert_eq!(m.adapters.is_some(), tag.uses_lora(), "{tag}");
            assert_eq!(m.bottlenecks.is_some(), tag.uses_bottleneck(), "{tag}");
            assert!(m.validate().is_ok());
            if let Some(ads) = &m.adapters {
                assert!(ads.iter().all(|a| a.rank() == 4 && a.alpha() == 1.0));
            }
        }
    }

    #[test]
    fn apply_rejects_a_second_strategy() {
        let cfg = cfg_with_r(4);
        let m = apply_strategy(square_model(), StrategyTag::LoraStatic, &cfg).unwrap();
        assert!(apply_strategy(m, StrategyTag::Full, &cfg).is_err());
    }

    #[test]
    fn rank_schedule_on_non_lora_strategy_is_a_config_error() {
        let mut cfg = cfg_with_r(4);
        cfg.schedule.lambda_adjust = 0.5;
        assert!(apply_strategy(square_model(), StrategyTag::Full, &cfg).is_err());
        assert!(apply_strategy(square_model(), StrategyTag::LoraDynamic, &cfg).is_ok());
        cfg.schedule.lambda_adjust = 0.0;
        assert!(apply_strategy(square_model(), StrategyTag::Full, &cfg).is_ok());
    }

    #[test]
    fn r_base_larger_than_layer_is_a_config_error() {
        let cfg = cfg_with_r(5);
        let narrow = init_model(&[8, 4, 8], 2, 0).unwrap();
        let err = apply_strategy(narrow, StrategyTag::LoraStatic, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn bottleneck_width_rounds_up() {
        let bot = BottleneckAdapter::init(6, 0);
        assert_eq!(bot.hidden(), 2);
        let bot = BottleneckAdapter::init(64, 0);
        assert_eq!(bot.hidden(), 16);
        assert_eq!(bot.param_count(), 2 * 64 * 16);
        assert!(bot.up.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_bottleneck_is_identity_in_forward() {
        let cfg = cfg_with_r(4);
        let plain = square_model();
        let with_bot = apply_strategy(plain.clone(), StrategyTag::Adapter, &cfg).unwrap();
        let x = Matrix::from_fn(3, 64, |r, c| ((r * 64 + c) as f64 * 0.11).cos());
        let a = plain.forward(&x).unwrap().logits;
        let b = with_bot.forward(&x).unwrap().logits;
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
    }

    #[test]
    fn trainable_sets_per_strategy() {
        use ParamKey::*;
        let cases = [
            (StrategyTag::Full, LayerWeight(0), true),
            (StrategyTag::Full, LayerBias(1), true),
            (StrategyTag::FeatureExtraction, LayerWeight(0), false),
            (StrategyTag::FeatureExtraction, HeadWeight, true),
            (StrategyTag::Bitfit, LayerBias(0), true),
            (StrategyTag::Bitfit, LayerWeight(0), false),
            (StrategyTag::Adapter, BottleneckDown(0), true),
            (StrategyTag::Adapter, LayerWeight(0), false),
            (StrategyTag::LoraStatic, AdapterA(2), true),
            (StrategyTag::LoraStatic, LayerWeight(2), false),
            (StrategyTag::LoraDynamic, AdapterB(0), true),
            (StrategyTag::LoraDynamic, LayerBias(0), false),
        ];
        for (tag, key, want) in cases {
            assert_eq!(is_trainable(tag, key), want, "{tag} {key:?}");
        }
        for tag in StrategyTag::ALL {
            assert!(is_trainable(tag, HeadWeight));
            assert!(is_trainable(tag, HeadBias));
        }
    }

    #[test]
    fn body_ratio_arithmetic() {
        let cfg = cfg_with_r(4);
        let full = apply_strategy(square_model(), StrategyTag::Full, &cfg).unwrap();
        assert_eq!(body_param_ratio(&full), 1.0);

        let fe = apply_strategy(square_model(), StrategyTag::FeatureExtraction, &cfg).unwrap();
        assert_eq!(body_param_ratio(&fe), 0.0);

        let bitfit = apply_strategy(square_model(), StrategyTag::Bitfit, &cfg).unwrap();
        assert_eq!(body_param_ratio(&bitfit), 0.0);
        // Bias tuning still moves parameters in absolute terms.
        assert_eq!(trainable_param_count(&bitfit), 4 * 64 + 64 * 4 + 4);

        let lora = apply_strategy(square_model(), StrategyTag::LoraStatic, &cfg).unwrap();
        // Rank-4 factors on 64x64 layers: 2 * 4 / 64.
        assert_eq!(body_param_ratio(&lora), 0.125);

        let adapter = apply_strategy(square_model(), StrategyTag::Adapter, &cfg).unwrap();
        assert_eq!(body_param_ratio(&adapter), 0.5);
        assert!(body_param_ratio(&lora) < body_param_ratio(&adapter));
    }

    #[test]
    fn absolute_counts_are_consistent() {
        let cfg = cfg_with_r(4);
        let m = apply_strategy(square_model(), StrategyTag::LoraStatic, &cfg).unwrap();
        let total = total_param_count(&m);
        let trainable = trainable_param_count(&m);
        // 4 base layers + biases + head + adapter factors.
        let base = 4 * 64 * 64 + 4 * 64 + 64 * 4 + 4;
        let adapters = 4 * 4 * (64 + 64);
        assert_eq!(total, base + adapters);
        assert_eq!(trainable, adapters + 64 * 4 + 4);
        assert!(trainable < total);
    }
}
