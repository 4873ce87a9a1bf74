//! Recursive (streaming) means: unit-weight, batch, and weighted updates,
//! plus the inverse-probability transform whose mean estimates the average
//! treatment effect.

use crate::error::{Error, Result};
use crate::record::{Record, StreamConfig};

/// Running mean with an accumulated weight (a plain count for unit-weight
/// streams, a pseudocount for weighted bootstrap replicates).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RecursiveMean {
    pub mean: f64,
    pub weight_sum: f64,
}

impl RecursiveMean {
    pub fn new() -> Self {
        RecursiveMean {
            mean: 0.0,
            weight_sum: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.weight_sum == 0.0
    }

    /// Folds one observation into the running mean.
    pub fn update(&mut self, z: f64) -> Result<()> {
        if !z.is_finite() {
            return Err(Error::NonFinite("mean update value"));
        }
        self.weight_sum += 1.0;
        self.mean += (z - self.mean) / self.weight_sum;
        Ok(())
    }

    /// Folds a pre-aggregated batch (sum and count) into the running mean.
    pub fn batch_update(&mut self, batch_sum: f64, batch_count: u64) -> Result<()> {
        if batch_count == 0 {
            return Err(Error::InvalidConfig(
                "batch_count must be >= 1".to_string(),
            ));
        }
        if !batch_sum.is_finite() {
            return Err(Error::NonFinite("batch sum"));
        }
        let total = self.weight_sum + batch_count as f64;
        self.mean += (batch_sum - batch_count as f64 * self.mean) / total;
        self.weight_sum = total;
        Ok(())
    }

    /// Weighted update used by the bootstrap replicates. A zero weight leaves
    /// the state untouched, bit for bit.
    pub fn weighted_update(&mut self, z: f64, w: u64) {
        if w == 0 {
            return;
        }
        let w = w as f64;
        self.weight_sum += w;
        self.mean += (w / self.weight_sum) * (z - self.mean);
    }
}

/// Inverse-probability-weighted contrast: its expectation over random
/// assignment is the average treatment effect.
pub fn pate_transform(r: &Record, cfg: &StreamConfig) -> f64 {
    let d = r.d();
    d * r.y / cfg.pi1 - (1.0 - d) * r.y / (1.0 - cfg.pi1)
}

/// Point estimate of the effect together with optional uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    pub tau_hat: f64,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n: u64,
    pub method: String,
}

/// Reads the treatment-effect point estimate off a running mean of the
/// transformed stream.
pub fn pate_point_estimate(state: &RecursiveMean) -> Result<EffectEstimate> {
    if state.is_empty() {
        return Err(Error::EmptyState("no observations in mean state"));
    }
    Ok(EffectEstimate {
        tau_hat: state.mean,
        se: None,
        ci_low: None,
        ci_high: None,
        n: state.weight_sum.round() as u64,
        method: "pate-ht".to_string(),
    })
}
