//! Input-variance rank scheduling.
//!
//! Layers whose inputs vary more get more adapter capacity: the target
//! rank is r_base * (1 + lambda_adjust * Var(X_l)), rounded half-up and
//! clamped to what the layer can hold. Hysteresis suppresses resizes
//! smaller than a threshold so capacity does not thrash between epochs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::rng::mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankSchedule {
    /// Base adapter rank, also the fixed rank for static LoRA.
    pub r_base: usize,
    /// Variance sensitivity; 0 disables rank adjustment entirely.
    pub lambda_adjust: f64,
    /// Refresh importances and ranks every this many epochs. Setting it
    /// above the epoch count disables refreshes for the whole run.
    pub refresh_every: usize,
    /// Minimum |target - current| that actually triggers a resize.
    pub hysteresis: usize,
}

impl Default for RankSchedule {
    fn default() -> Self {
        RankSchedule {
            r_base: 4,
            lambda_adjust: 0.5,
            refresh_every: 1,
            hysteresis: 1,
        }
    }
}

impl RankSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.r_base == 0 {
            return Err(Error::config("r_base must be at least 1".to_string()));
        }
        if self.refresh_every == 0 {
            return Err(Error::config("refresh_every must be at least 1".to_string()));
        }
        if self.hysteresis == 0 {
            return Err(Error::config("hysteresis must be at least 1".to_string()));
        }
        if !self.lambda_adjust.is_finite() || self.lambda_adjust < 0.0 {
            return Err(Error::config(format!(
                "lambda_adjust must be finite and non-negative, got {}",
                self.lambda_adjust
            )));
        }
        Ok(())
    }

    /// Target rank for a layer whose inputs have the given variance,
    /// clamped to [1, r_max]. Rounds half-up.
    pub fn target_rank(&self, variance: f64, r_max: usize) -> Result<usize> {
        if !variance.is_finite() || variance < 0.0 {
            return Err(Error::contract(format!(
                "variance must be finite and non-negative, got {variance}"
            )));
        }
        if r_max == 0 {
            return Err(Error::contract("r_max must be at least 1".to_string()));
        }
        let raw = self.r_base as f64 * (1.0 + self.lambda_adjust * variance);
        let rounded = (raw + 0.5).floor();
        if !rounded.is_finite() || rounded >= r_max as f64 {
            return Ok(r_max);
        }
        Ok((rounded as usize).max(1).min(r_max))
    }
}

/// One applied resize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankChange {
    pub layer: usize,
    pub old_rank: usize,
    pub new_rank: usize,
    /// ||delta_old - delta_new||_F: zero for grows, the truncated mass for
    /// shrinks.
    pub delta_change_norm: f64,
}

/// Retarget every adapter from its layer's mean input variance. Returns
/// the changes actually applied; layers inside the hysteresis band are
/// left alone. The optimizer must reset momentum for resized factors.
pub fn update_ranks(
    model: &mut Model,
    schedule: &RankSchedule,
    variances: &[f64],
    seed: u64,
) -> Result<Vec<RankChange>> {
    let n_layers = model.layers.len();
    let Some(adapters) = model.adapters.as_mut() else {
        return Err(Error::contract(
            "rank update requires adapter slots".to_string(),
        ));
    };
    if variances.len() != n_layers {
        return Err(Error::contract(format!(
            "{} variances for {n_layers} layers",
            variances.len()
        )));
    }
    let mut changes = Vec::new();
    for (l, (ad, &var)) in adapters.iter_mut().zip(variances).enumerate() {
        let r_max = ad.d_in().min(ad.d_out());
        let target = schedule.target_rank(var, r_max)?;
        let current = ad.rank();
        if target.abs_diff(current) < schedule.hysteresis {
            continue;
        }
        let old_delta = ad.delta();
        let resized = ad.resize(target, mix(seed, l as u64))?;
        let delta_change_norm = old_delta.sub(&resized.delta())?.frobenius_norm();
        *ad = resized;
        changes.push(RankChange {
            layer: l,
            old_rank: current,
            new_rank: target,
            delta_change_norm,
        });
    }
    Ok(changes)
}
