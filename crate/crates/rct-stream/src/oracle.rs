//! Full-retention batch reference implementations, used only to verify the
//! streaming estimators. Everything here deliberately keeps all n records in
//! memory and is kept out of the production streaming paths.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mean::pate_transform;
use crate::record::{Record, StreamConfig};
use crate::rng::{mix64, SplitMix64};

/// A fully retained dataset. Only constructed in verification contexts.
#[derive(Debug, Clone)]
pub struct RetainedDataset {
    pub records: Vec<Record>,
}

impl RetainedDataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyState("retained dataset is empty"));
        }
        let k = records[0].k();
        if let Some(r) = records.iter().find(|r| r.k() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: r.k(),
            });
        }
        Ok(RetainedDataset { records })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn k(&self) -> usize {
        self.records[0].k()
    }

    fn xtx(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut xtx = DMatrix::zeros(k, k);
        for r in &self.records {
            let x = DVector::from_column_slice(&r.x);
            xtx += &x * x.transpose();
        }
        xtx
    }

    /// Groups record indices by cluster id; records without an id each form
    /// their own singleton cluster.
    fn cluster_groups(&self) -> Vec<Vec<usize>> {
        let mut keyed: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
        let mut singletons = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            match &r.cluster_id {
                Some(id) => keyed.entry(id.clone()).or_default().push(i),
                None => singletons.push(vec![i]),
            }
        }
        keyed.into_values().chain(singletons).collect()
    }
}

/// Exact normal-equations least squares on retained data.
#[derive(Debug, Clone)]
pub struct BatchOls {
    pub beta: DVector<f64>,
    pub xtx_inv: DMatrix<f64>,
    pub ssr: f64,
}

pub fn batch_ols(data: &RetainedDataset) -> Result<BatchOls> {
    let k = data.k();
    let xtx = data.xtx();
    let mut xty = DVector::zeros(k);
    for r in &data.records {
        let x = DVector::from_column_slice(&r.x);
        xty += x * r.y;
    }
    let lu = xtx.clone().lu();
    let beta = lu.solve(&xty).ok_or(Error::NotIdentifiable {
        buffered: data.n(),
    })?;
    let xtx_inv = xtx.lu().try_inverse().ok_or(Error::NotIdentifiable {
        buffered: data.n(),
    })?;
    let mut ssr = 0.0;
    for r in &data.records {
        let x = DVector::from_column_slice(&r.x);
        let e = x.dot(&beta) - r.y;
        ssr += e * e;
    }
    Ok(BatchOls { beta, xtx_inv, ssr })
}

/// HC0 sandwich from final-fit residuals: bread (X'X)^-1 around
/// sum x x' e^2.
pub fn batch_hc0(data: &RetainedDataset, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = data.k();
    let mut meat = DMatrix::zeros(k, k);
    for r in &data.records {
        let x = DVector::from_column_slice(&r.x);
        let e = x.dot(beta) - r.y;
        meat += &x * x.transpose() * (e * e);
    }
    let bread = data
        .xtx()
        .lu()
        .try_inverse()
        .ok_or(Error::NotIdentifiable {
            buffered: data.n(),
        })?;
    Ok(&bread * meat * &bread)
}

/// Cluster sandwich built directly from the block-diagonal construction:
/// meat = sum_j (X_j' e_j)(X_j' e_j)'.
pub fn batch_cluster_sandwich(
    data: &RetainedDataset,
    beta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let k = data.k();
    let groups = data.cluster_groups();
    if groups.len() < 2 {
        return Err(Error::TooFewClusters { got: groups.len() });
    }
    let mut meat = DMatrix::zeros(k, k);
    for group in &groups {
        let mut u = DVector::zeros(k);
        for &i in group {
            let r = &data.records[i];
            let x = DVector::from_column_slice(&r.x);
            let e = x.dot(beta) - r.y;
            u += x * e;
        }
        meat += &u * u.transpose();
    }
    let bread = data
        .xtx()
        .lu()
        .try_inverse()
        .ok_or(Error::NotIdentifiable {
            buffered: data.n(),
        })?;
    Ok(&bread * meat * &bread)
}

/// Arithmetic difference of arm means.
pub fn diff_in_means(data: &RetainedDataset) -> Result<f64> {
    let (mut st, mut nt, mut sc, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for r in &data.records {
        if r.treated() {
            st += r.y;
            nt += 1;
        } else {
            sc += r.y;
            nc += 1;
        }
    }
    if nt == 0 || nc == 0 {
        return Err(Error::EmptyState("one treatment arm is empty"));
    }
    Ok(st / nt as f64 - sc / nc as f64)
}

/// Classic resample-with-replacement bootstrap of the transformed-outcome
/// mean. Returns the B replicate estimates.
pub fn batch_multinomial_bootstrap(
    data: &RetainedDataset,
    cfg: &StreamConfig,
    b_count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if b_count < 2 {
        return Err(Error::TooFewReplicates { got: b_count });
    }
    let z: Vec<f64> = data
        .records
        .iter()
        .map(|r| pate_transform(r, cfg))
        .collect();
    let n = z.len() as u64;
    let mut rng = SplitMix64::new(mix64(seed));
    Ok((0..b_count)
        .map(|_| {
            let mut sum = 0.0;
            for _ in 0..n {
                sum += z[rng.next_below(n) as usize];
            }
            sum / n as f64
        })
        .collect())
}

/// Cluster bootstrap oracle: resamples whole clusters with replacement and
/// recomputes the transformed-outcome mean over the concatenated resample.
pub fn batch_cluster_bootstrap(
    data: &RetainedDataset,
    cfg: &StreamConfig,
    b_count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if b_count < 2 {
        return Err(Error::TooFewReplicates { got: b_count });
    }
    let groups = data.cluster_groups();
    if groups.len() < 2 {
        return Err(Error::TooFewClusters { got: groups.len() });
    }
    // per-cluster (count, z-sum)
    let stats: Vec<(f64, f64)> = groups
        .iter()
        .map(|g| {
            let sum: f64 = g
                .iter()
                .map(|&i| pate_transform(&data.records[i], cfg))
                .sum();
            (g.len() as f64, sum)
        })
        .collect();
    let j = stats.len() as u64;
    let mut rng = SplitMix64::new(mix64(seed));
    Ok((0..b_count)
        .map(|_| {
            let mut count = 0.0;
            let mut sum = 0.0;
            for _ in 0..j {
                let (c, s) = stats[rng.next_below(j) as usize];
                count += c;
                sum += s;
            }
            sum / count
        })
        .collect())
}
