//! Gradient-sensitivity layer importance and capacity allocation.
//!
//! The importance of a layer is the Frobenius inner product between the
//! loss gradient at its effective weight and the effective weight itself:
//! a first-order estimate of how much the loss would move if the whole
//! layer were scaled. Importances are turned into per-layer allocation
//! weights with a softmax, so they sum to one and shifting every
//! importance by a constant changes nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::Model;

/// One importance refresh: raw importances and the allocation they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    pub epoch: usize,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Frobenius inner product of the loss gradient with the weight.
pub fn layer_importance(grad: &Matrix, weight: &Matrix) -> Result<f64> {
    if grad.shape() != weight.shape() {
        return Err(Error::Shape {
            op: "layer_importance",
            left_rows: grad.rows(),
            left_cols: grad.cols(),
            right_rows: weight.rows(),
            right_cols: weight.cols(),
        });
    }
    Ok(grad
        .data()
        .iter()
        .zip(weight.data())
        .map(|(g, w)| g * w)
        .sum())
}

/// Softmax over importances, stabilized by subtracting the max.
pub fn allocation_weights(gamma: &[f64]) -> Result<Vec<f64>> {
    if gamma.is_empty() {
        return Err(Error::contract("no layers to allocate over".to_string()));
    }
    if let Some(bad) = gamma.iter().find(|g| !g.is_finite()) {
        return Err(Error::contract(format!("non-finite importance {bad}")));
    }
    let max = gamma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = gamma.iter().map(|g| (g - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Recompute importances from mean effective-weight gradients and write
/// the resulting allocation weights into the model's adapters.
pub fn refresh_importance(model: &mut Model, grads: &[Matrix], epoch: usize) -> Result<ImportanceState> {
    if model.adapters.is_none() {
        return Err(Error::contract(
            "importance refresh requires adapter slots".to_string(),
        ));
    }
    if grads.len() != model.layers.len() {
        return Err(Error::contract(format!(
            "{} gradients for {} layers",
            grads.len(),
            model.layers.len()
        )));
    }
    let mut gamma = Vec::with_capacity(grads.len());
    for (l, grad) in grads.iter().enumerate() {
        let eff = model.effective_weight(l)?;
        gamma.push(layer_importance(grad, &eff)?);
    }
    let alpha = allocation_weights(&gamma)?;
    let adapters = model.adapters.as_mut().expect("checked above");
    for (ad, &a) in adapters.iter_mut().zip(&alpha) {
        ad.set_alpha(a)?;
    }
    Ok(ImportanceState {
        epoch,
        gamma,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_model;
    use crate::strategy::{apply_strategy, StrategyTag};
    use crate::train::TrainConfig;

    #[test]
    fn importance_matches_double_loop_oracle() {
        let g = Matrix::from_fn(3, 4, |r, c| (r as f64 - 1.0) * 0.3 + c as f64 * 0.1);
        let w = Matrix::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.7).sin());
        let mut oracle = 0.0;
        for r in 0..3 {
            for c in 0..4 {
                oracle += g.get(r, c) * w.get(r, c);
            }
        }
        let got = layer_importance(&g, &w).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!(layer_importance(&g, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn importance_is_signed() {
        let w = Matrix::from_fn(2, 2, |_, _| 1.0);
        let g_pos = Matrix::from_fn(2, 2, |_, _| 0.5);
        let g_neg = Matrix::from_fn(2, 2, |_, _| -0.5);
        assert_eq!(layer_importance(&g_pos, &w).unwrap(), 2.0);
        assert_eq!(layer_importance(&g_neg, &w).unwrap(), -2.0);
    }

    #[test]
    fn allocation_conformance_case() {
        let alpha = allocation_weights(&[0.0, 3.0_f64.ln()]).unwrap();
        assert!((alpha[0] - 0.25).abs() < 1e-12);
        assert!((alpha[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn allocation_sums_to_one_and_is_shift_invariant() {
        let gamma = [0.3, -1.2, 4.0, 0.0];
        let a = allocation_weights(&gamma).unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = gamma.iter().map(|g| g + 123.4).collect();
        let b = allocation_weights(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // Order preserved: bigger importance, bigger share.
        assert!(a[2] > a[0] && a[0] > a[1]);
    }

    #[test]
    fn allocation_is_stable_under_extreme_importances() {
        let a = allocation_weights(&[1e4, 0.0]).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert!((a[0] - 1.0).abs() < 1e-12);
        let uniform = allocation_weights(&[7.0; 5]).unwrap();
        assert!(uniform.iter().all(|v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn allocation_rejects_bad_input() {
        assert!(allocation_weights(&[]).is_err());
        assert!(allocation_weights(&[1.0, f64::NAN]).is_err());
        assert!(allocation_weights(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn refresh_writes_alphas_into_adapters() {
        let cfg = TrainConfig::default();
        let model = init_model(&[6, 8, 8, 4], 3, 5).unwrap();
        let mut model = apply_strategy(model, StrategyTag::LoraDynamic, &cfg).unwrap();
        let grads: Vec<Matrix> = model
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                Matrix::from_fn(layer.d_in(), layer.d_out(), |_, _| 0.01 * (l as f64 + 1.0))
            })
            .collect();
        let state = refresh_importance(&mut model, &grads, 3).unwrap();
        assert_eq!(state.epoch, 3);
        assert_eq!(state.alpha.len(), 3);
        assert_eq!(model.alphas(), state.alpha);
        assert!((state.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let wrong = vec![Matrix::zeros(2, 2)];
        assert!(refresh_importance(&mut model, &wrong, 4).is_err());

        let mut bare = init_model(&[6, 4], 3, 5).unwrap();
        let g = vec![Matrix::zeros(6, 4)];
        assert!(refresh_importance(&mut bare, &g, 1).is_err());
    }
}
