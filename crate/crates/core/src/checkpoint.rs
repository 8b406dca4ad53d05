//! Versioned model checkpoints.
//!
//! A checkpoint is a JSON document holding the full model (weights,
//! installed add-ons, strategy tag) plus the seed it was trained with.
//! Serialization uses shortest round-trip float formatting, so a
//! save/load cycle restores every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::strategy::{body_param_ratio, total_param_count, trainable_param_count};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(seed: u64, model: Model) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed,
            model,
        }
    }
}

/// Write `contents` to `path` atomically: write a sibling temp file,
/// then rename over the target. Readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string(ckpt)?;
    write_atomic(path, &json)
}

/// Load and fully validate a checkpoint. Any failure (unreadable file,
/// malformed JSON, wrong version, inconsistent model) is diagnosed.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::contract(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let ckpt: Checkpoint = serde_json::from_str(&raw)
        .map_err(|e| Error::contract(format!("malformed checkpoint {}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::contract(format!(
            "unsupported checkpoint version {} (this build reads version {})",
            ckpt.version, CHECKPOINT_VERSION
        )));
    }
    ckpt.model
        .validate()
        .map_err(|e| Error::contract(format!("inconsistent checkpoint {}: {e}", path.display())))?;
    Ok(ckpt)
}

/// Human-readable summary: dims, strategy, per-layer adapter table,
/// and the trainable-parameter ratio recounted from the stored arrays.
pub fn describe_checkpoint(ckpt: &Checkpoint) -> String {
    let model = &ckpt.model;
    let mut out = String::new();
    let dims: Vec<String> = std::iter::once(model.input_dim())
        .chain(model.layers.iter().map(|l| l.d_out()))
        .map(|d| d.to_string())
        .collect();
    out.push_str(&format!(
        "checkpoint version {} (seed {})\n",
        ckpt.version, ckpt.seed
    ));
    out.push_str(&format!(
        "strategy: {}\ndims: {} -> {} classes\n",
        model.strategy.name(),
        dims.join("x"),
        model.n_classes()
    ));

    match (&model.adapters, &model.bottlenecks) {
        (Some(ads), _) => {
            out.push_str(
                "layer      rank     alpha       |A|_F       |B|_F      |dW|_F\n",
            );
            for (l, ad) in ads.iter().enumerate() {
                out.push_str(&format!(
                    "{:<9} {:>5} {:>9.6} {:>11.6} {:>11.6} {:>11.6}\n",
                    l,
                    ad.rank(),
                    ad.alpha(),
                    ad.a().frobenius_norm(),
                    ad.b().frobenius_norm(),
                    ad.delta().scale(ad.alpha()).frobenius_norm()
                ));
            }
            let alpha_sum: f64 = ads.iter().map(|ad| ad.alpha()).sum();
            out.push_str(&format!("alpha sum: {alpha_sum}\n"));
        }
        (None, Some(bns)) => {
            out.push_str("layer     width    hidden\n");
            for (l, bn) in bns.iter().enumerate() {
                out.push_str(&format!("{:<9} {:>5} {:>9}\n", l, bn.width(), bn.hidden()));
            }
        }
        (None, None) => {
            for (l, layer) in model.layers.iter().enumerate() {
                out.push_str(&format!("layer {l}: {}x{}\n", layer.d_in(), layer.d_out()));
            }
        }
    }

    let trainable = trainable_param_count(model);
    let total = total_param_count(model);
    out.push_str(&format!(
        "trainable params: {trainable} of {total} ({:.4}% body weight ratio)\n",
        100.0 * body_param_ratio(model)
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::network::init_model;
    use crate::strategy::{apply_strategy, StrategyTag};
    use crate::train::TrainConfig;

    fn dyn_model() -> Model {
        let m = init_model(&[5, 6, 6], 3, 11).unwrap();
        apply_strategy(m, StrategyTag::LoraDynamic, &TrainConfig::default()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let model = dyn_model();
        let batch = Matrix::from_fn(4, 5, |i, j| (i * 5 + j) as f64 * 0.07 - 0.5);
        let before = model.forward(&batch).unwrap().logits;

        save_checkpoint(&path, &Checkpoint::new(11, model.clone())).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.version, CHECKPOINT_VERSION);
        assert_eq!(loaded.seed, 11);
        assert_eq!(loaded.model, model);

        let after = loaded.model.forward(&batch).unwrap().logits;
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn no_temp_file_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &Checkpoint::new(0, dyn_model())).unwrap();
        let names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["ckpt.json".to_string()]);
    }

    #[test]
    fn corrupt_file_is_diagnosed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        fs::write(&path, "{\"version\": 1, \"seed\":").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("malformed"), "{err}");
        assert!(err.contains("ckpt.json"), "{err}");
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_checkpoint(Path::new("/nonexistent/ckpt.json"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("/nonexistent/ckpt.json"), "{err}");
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut ckpt = Checkpoint::new(0, dyn_model());
        ckpt.version = 99;
        fs::write(&path, serde_json::to_string(&ckpt).unwrap()).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn tampered_model_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut model = dyn_model();
        model.bottlenecks = Some(Vec::new());
        fs::write(
            &path,
            serde_json::to_string(&Checkpoint::new(0, model)).unwrap(),
        )
        .unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("inconsistent"), "{err}");
    }

    #[test]
    fn fresh_dynamic_description_reports_zero_delta() {
        let desc = describe_checkpoint(&Checkpoint::new(7, dyn_model()));
        assert!(desc.contains("strategy: lora_dynamic"), "{desc}");
        assert!(desc.contains("dims: 5x6x6 -> 3 classes"), "{desc}");
        // B is zero-initialized, so every ||dW||_F column entry is zero.
        for line in desc.lines().filter(|l| l.starts_with(char::is_numeric)) {
            let last = line.split_whitespace().last().unwrap();
            assert_eq!(last.parse::<f64>().unwrap(), 0.0, "{line}");
        }
        assert!(desc.contains("alpha sum: 2\n"), "{desc}");
    }

    #[test]
    fn description_ratio_matches_enumeration() {
        let m = init_model(&[64, 64, 64, 64, 64], 4, 3).unwrap();
        let m = apply_strategy(m, StrategyTag::LoraStatic, &TrainConfig::default()).unwrap();
        let desc = describe_checkpoint(&Checkpoint::new(3, m));
        assert!(desc.contains("(12.5000% body weight ratio)"), "{desc}");
    }
}
