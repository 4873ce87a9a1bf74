//! Online bootstrap: every arriving record receives a vector of B Poisson(1)
//! weights and updates B replicate estimators in place of resampling retained
//! data. Weights keyed by cluster id emulate the cluster bootstrap.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mean::{pate_transform, RecursiveMean};
use crate::record::{Record, StreamConfig};
use crate::rls::{rls_init, RlsState, DEGENERACY_EPS};
use crate::rng::WeightGenerator;

/// B replicate running means of the transformed stream.
#[derive(Debug, Clone)]
pub struct BootstrapMeanEnsemble {
    pub replicates: Vec<RecursiveMean>,
    records_seen: u64,
}

impl BootstrapMeanEnsemble {
    pub fn new(b_count: usize) -> Self {
        BootstrapMeanEnsemble {
            replicates: vec![RecursiveMean::new(); b_count],
            records_seen: 0,
        }
    }

    pub fn b_count(&self) -> usize {
        self.replicates.len()
    }

    pub fn records_seen(&self) -> u64 {
        self.records_seen
    }

    /// Applies one record with an externally supplied weight vector.
    pub fn step_with_weights(&mut self, z: f64, weights: &[u64]) -> Result<()> {
        if weights.len() != self.replicates.len() {
            return Err(Error::DimensionMismatch {
                expected: self.replicates.len(),
                got: weights.len(),
            });
        }
        if !z.is_finite() {
            return Err(Error::NonFinite("transformed observation"));
        }
        for (rep, &w) in self.replicates.iter_mut().zip(weights) {
            rep.weighted_update(z, w);
        }
        self.records_seen += 1;
        Ok(())
    }

    /// Transforms the record, draws its weight vector, and updates all
    /// replicates. The record is free to be dropped afterwards.
    pub fn step(
        &mut self,
        r: &Record,
        gen: &WeightGenerator,
        cfg: &StreamConfig,
    ) -> Result<()> {
        cfg.check_record(r)?;
        let z = pate_transform(r, cfg);
        let weights = gen.draw_weights(
            self.records_seen,
            r.cluster_id.as_deref(),
            self.replicates.len(),
        )?;
        self.step_with_weights(z, &weights)
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.replicates.iter().map(|r| r.mean).collect()
    }
}

/// One weighted-RLS bootstrap replicate: coefficients plus its own inverse
/// Gram matrix.
#[derive(Debug, Clone)]
pub struct RlsReplicate {
    pub beta: DVector<f64>,
    pub z_mat: DMatrix<f64>,
}

impl RlsReplicate {
    /// Weighted rank-one update; weight zero is a no-op. With w = 1 this is
    /// exactly the unweighted recursion.
    pub fn weighted_update(&mut self, r: &Record, w: u64) -> Result<()> {
        if w == 0 {
            return Ok(());
        }
        let w = w as f64;
        let x = DVector::from_column_slice(&r.x);
        let zx = &self.z_mat * &x;
        let denom = 1.0 + w * x.dot(&zx);
        if denom <= DEGENERACY_EPS {
            return Err(Error::Degenerate { denom });
        }
        let outer = &zx * zx.transpose();
        self.z_mat -= outer * (w / denom);
        let pred_err = r.y - x.dot(&self.beta);
        let gain = &self.z_mat * &x;
        self.beta += gain * (w * pred_err);
        Ok(())
    }
}

/// Streaming driver for the weighted-RLS bootstrap: fits shared starting
/// values on the first m records, then clones them into B replicates that
/// are advanced with per-replicate Poisson weights.
#[derive(Debug)]
pub struct BootstrapRlsStream<R: AsRef<Record> = Record> {
    cfg: StreamConfig,
    gen: WeightGenerator,
    b_count: usize,
    buffer: Vec<R>,
    buffer_cap: usize,
    replicates: Vec<RlsReplicate>,
    shared_init: Option<RlsState>,
    records_seen: u64,
    weighted_records: u64,
}

impl<R: AsRef<Record>> BootstrapRlsStream<R> {
    pub fn new(cfg: StreamConfig, gen: WeightGenerator, b_count: usize) -> Result<Self> {
        cfg.validate()?;
        if b_count < 2 {
            return Err(Error::TooFewReplicates { got: b_count });
        }
        let target = cfg.init_m.max(cfg.k);
        Ok(BootstrapRlsStream {
            cfg,
            gen,
            b_count,
            buffer: Vec::new(),
            buffer_cap: (2 * target).max(target + 16),
            replicates: Vec::new(),
            shared_init: None,
            records_seen: 0,
            weighted_records: 0,
        })
    }

    fn init_target(&self) -> usize {
        self.cfg.init_m.max(self.cfg.k)
    }

    pub fn initialized(&self) -> bool {
        self.shared_init.is_some()
    }

    /// The common starting point every replicate was cloned from.
    pub fn shared_init(&self) -> Option<&RlsState> {
        self.shared_init.as_ref()
    }

    pub fn records_seen(&self) -> u64 {
        self.records_seen
    }

    pub fn push(&mut self, item: R) -> Result<()> {
        self.cfg.check_record(item.as_ref())?;
        if self.shared_init.is_none() {
            self.buffer.push(item);
            self.records_seen += 1;
            if self.buffer.len() >= self.init_target() {
                match rls_init(&self.buffer) {
                    Ok(state) => {
                        self.replicates = vec![
                            RlsReplicate {
                                beta: state.beta.clone(),
                                z_mat: state.z_inv.clone(),
                            };
                            self.b_count
                        ];
                        self.shared_init = Some(state);
                        self.buffer.clear();
                        self.buffer.shrink_to_fit();
                    }
                    Err(Error::NotIdentifiable { .. })
                        if self.buffer.len() < self.buffer_cap => {}
                    Err(e) => return Err(e),
                }
            }
            return Ok(());
        }
        let r = item.as_ref();
        let weights = self.gen.draw_weights(
            self.weighted_records,
            r.cluster_id.as_deref(),
            self.b_count,
        )?;
        for (rep, &w) in self.replicates.iter_mut().zip(&weights) {
            rep.weighted_update(r, w)?;
        }
        self.records_seen += 1;
        self.weighted_records += 1;
        Ok(())
    }

    pub fn replicates(&self) -> &[RlsReplicate] {
        &self.replicates
    }

    /// Replicate estimates of one coefficient (index 1 = treatment effect).
    pub fn coefficient_estimates(&self, idx: usize) -> Vec<f64> {
        self.replicates.iter().map(|r| r.beta[idx]).collect()
    }

    /// Ratio of initialization records to total records; the bootstrap
    /// understates the variance by roughly this share of the data.
    pub fn init_fraction(&self) -> f64 {
        if self.records_seen == 0 {
            0.0
        } else {
            self.init_target() as f64 / self.records_seen as f64
        }
    }
}

/// Replicate spread condensed into a variance and a percentile interval.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSummary {
    pub variance: f64,
    pub percentile_ci: (f64, f64),
    pub b_effective: usize,
}

/// Summarizes a mean ensemble, skipping replicates that never received a
/// positive weight.
pub fn summarize_means(ens: &BootstrapMeanEnsemble, level: f64) -> Result<BootstrapSummary> {
    let estimates: Vec<f64> = ens
        .replicates
        .iter()
        .filter(|r| r.weight_sum > 0.0)
        .map(|r| r.mean)
        .collect();
    summarize_estimates(&estimates, level)
}

/// Summarizes a slice of replicate estimates.
pub fn summarize_estimates(estimates: &[f64], level: f64) -> Result<BootstrapSummary> {
    let b = estimates.len();
    if b < 2 {
        return Err(Error::TooFewReplicates { got: b });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let mean = estimates.iter().sum::<f64>() / b as f64;
    let variance = estimates
        .iter()
        .map(|e| (e - mean) * (e - mean))
        .sum::<f64>()
        / (b - 1) as f64;
    let mut sorted = estimates.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapSummary {
        variance,
        percentile_ci: (quantile(&sorted, alpha), quantile(&sorted, 1.0 - alpha)),
        b_effective: b,
    })
}

/// Linear-interpolation quantile of a sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}
