//! Deterministic synthetic experiment streams with known ground truth.

use crate::error::{Error, Result};
use crate::record::Record;
use crate::rng::{mix64, SplitMix64};

/// Cluster structure of the generated stream: J clusters with a shared
/// random intercept calibrated to the target intraclass correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSpec {
    pub j: usize,
    pub icc: f64,
}

/// Full description of a synthetic data-generating process.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    pub n: usize,
    pub k: usize,
    /// True treatment effect; always the coefficient on x[1].
    pub tau: f64,
    /// True coefficients, length k; beta[1] must equal tau.
    pub beta: Vec<f64>,
    pub pi1: f64,
    pub noise_sd: f64,
    /// Error SD multiplier under treatment; 1 means homoscedastic.
    pub hetero_factor: f64,
    pub cluster_spec: Option<ClusterSpec>,
    /// Allocate exactly round(n * pi1) treated units (or treated clusters
    /// when clustered) instead of Bernoulli draws.
    pub exact_count: bool,
    pub seed: u64,
}

impl DgpSpec {
    /// Homoscedastic i.i.d. design: intercept, treatment, and k-2 standard
    /// normal covariates with the given coefficients.
    pub fn new(n: usize, k: usize, tau: f64, pi1: f64, noise_sd: f64, seed: u64) -> Self {
        let mut beta = vec![0.0; k];
        if k > 1 {
            beta[1] = tau;
        }
        DgpSpec {
            n,
            k,
            tau,
            beta,
            pi1,
            noise_sd,
            hetero_factor: 1.0,
            cluster_spec: None,
            exact_count: false,
            seed,
        }
    }

    pub fn with_beta(mut self, beta: Vec<f64>) -> Self {
        self.beta = beta;
        self.beta[1] = self.tau;
        self
    }

    pub fn with_hetero(mut self, factor: f64) -> Self {
        self.hetero_factor = factor;
        self
    }

    pub fn with_clusters(mut self, j: usize, icc: f64) -> Self {
        self.cluster_spec = Some(ClusterSpec { j, icc });
        self
    }

    pub fn with_exact_count(mut self) -> Self {
        self.exact_count = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k < 2 {
            return Err(Error::InvalidConfig(format!(
                "need n >= 1 and k >= 2, got n = {}, k = {}",
                self.n, self.k
            )));
        }
        if self.beta.len() != self.k {
            return Err(Error::InvalidConfig(format!(
                "beta length {} != k = {}",
                self.beta.len(),
                self.k
            )));
        }
        if self.beta[1] != self.tau {
            return Err(Error::InvalidConfig(
                "beta[1] must equal tau".to_string(),
            ));
        }
        if !(self.pi1 > 0.0 && self.pi1 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "pi1 must lie in (0, 1), got {}",
                self.pi1
            )));
        }
        if self.noise_sd < 0.0 || self.hetero_factor < 0.0 {
            return Err(Error::InvalidConfig(
                "noise_sd and hetero_factor must be non-negative".to_string(),
            ));
        }
        if let Some(cs) = &self.cluster_spec {
            if cs.j == 0 || cs.j > self.n {
                return Err(Error::InvalidConfig(format!(
                    "cluster count {} out of range for n = {}",
                    cs.j, self.n
                )));
            }
            if !(0.0..1.0).contains(&cs.icc) {
                return Err(Error::InvalidConfig(format!(
                    "icc must lie in [0, 1), got {}",
                    cs.icc
                )));
            }
        }
        Ok(())
    }

    /// Materializes the stream. Records arrive grouped by cluster when a
    /// cluster spec is present.
    pub fn generate(&self) -> Result<Vec<Record>> {
        self.validate()?;
        let mut rng = SplitMix64::new(mix64(self.seed));
        match &self.cluster_spec {
            None => self.generate_iid(&mut rng),
            Some(cs) => self.generate_clustered(&mut rng, *cs),
        }
    }

    fn assignments(&self, rng: &mut SplitMix64, units: usize) -> Vec<bool> {
        if self.exact_count {
            let treated = (units as f64 * self.pi1).round() as usize;
            let mut flags: Vec<bool> = (0..units).map(|i| i < treated).collect();
            // Fisher-Yates shuffle
            for i in (1..units).rev() {
                let j = rng.next_below(i as u64 + 1) as usize;
                flags.swap(i, j);
            }
            flags
        } else {
            (0..units).map(|_| rng.next_f64() < self.pi1).collect()
        }
    }

    fn outcome(&self, rng: &mut SplitMix64, treated: bool, extra: f64) -> Record {
        let covs: Vec<f64> = (2..self.k).map(|_| rng.next_normal()).collect();
        let mut x = vec![1.0, if treated { 1.0 } else { 0.0 }];
        x.extend_from_slice(&covs);
        let systematic: f64 = x.iter().zip(&self.beta).map(|(a, b)| a * b).sum();
        let scale = if treated {
            self.noise_sd * self.hetero_factor
        } else {
            self.noise_sd
        };
        let y = systematic + extra + scale * rng.next_normal();
        Record::new(y, x, None).expect("generated record is valid by construction")
    }

    fn generate_iid(&self, rng: &mut SplitMix64) -> Result<Vec<Record>> {
        let flags = self.assignments(rng, self.n);
        Ok(flags
            .into_iter()
            .map(|d| self.outcome(rng, d, 0.0))
            .collect())
    }

    fn generate_clustered(&self, rng: &mut SplitMix64, cs: ClusterSpec) -> Result<Vec<Record>> {
        // cluster effect variance chosen so residual ICC equals cs.icc
        let cluster_sd = (cs.icc / (1.0 - cs.icc)).sqrt() * self.noise_sd;
        let flags = self.assignments(rng, cs.j);
        let base = self.n / cs.j;
        let remainder = self.n % cs.j;
        let mut records = Vec::with_capacity(self.n);
        for (j, &treated) in flags.iter().enumerate() {
            let size = base + usize::from(j < remainder);
            let effect = cluster_sd * rng.next_normal();
            let id = format!("c{j:06}").into_bytes();
            for _ in 0..size {
                let mut r = self.outcome(rng, treated, effect);
                r.cluster_id = Some(id.clone());
                records.push(r);
            }
        }
        Ok(records)
    }
}
