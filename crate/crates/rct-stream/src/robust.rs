//! Robust covariance assembly: cluster sandwich from aggregated per-cluster
//! contributions, an HC0-style meat accumulated from standardized recursive
//! residuals, and the closed-form delta-method cluster variance for the
//! covariate-free design.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::record::Record;
use crate::rls::{RlsState, VarianceReport, DEGENERACY_EPS};

/// The k-vector u_j = X_j' e_j a cluster contributes to the sandwich meat.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterContribution {
    pub u: Vec<f64>,
}

impl ClusterContribution {
    pub fn new(u: Vec<f64>) -> Result<Self> {
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cluster contribution entry"));
        }
        Ok(ClusterContribution { u })
    }

    /// Aggregates a cluster's records against a fixed coefficient vector,
    /// with residuals e_i = x_i' beta - y_i.
    pub fn from_records(records: &[Record], beta: &[f64]) -> Result<Self> {
        let k = beta.len();
        let beta_v = DVector::from_column_slice(beta);
        let mut u = DVector::<f64>::zeros(k);
        for r in records {
            if r.k() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: r.k(),
                });
            }
            let x = DVector::from_column_slice(&r.x);
            let e = x.dot(&beta_v) - r.y;
            u += x * e;
        }
        ClusterContribution::new(u.iter().copied().collect())
    }
}

/// Running sum of outer products u_j u_j' plus the bread matrix.
#[derive(Debug, Clone)]
pub struct SandwichAccumulator {
    pub meat: DMatrix<f64>,
    pub bread: Option<DMatrix<f64>>,
    pub j_count: usize,
}

impl SandwichAccumulator {
    pub fn new(k: usize) -> Self {
        SandwichAccumulator {
            meat: DMatrix::zeros(k, k),
            bread: None,
            j_count: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.meat.nrows()
    }

    pub fn set_bread(&mut self, bread: DMatrix<f64>) {
        self.bread = Some(bread);
    }

    /// Adds one cluster's outer product; contributions commute, so any
    /// arrival order gives the same meat up to floating-point roundoff.
    pub fn absorb(&mut self, c: &ClusterContribution) -> Result<()> {
        if c.u.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: c.u.len(),
            });
        }
        let u = DVector::from_column_slice(&c.u);
        self.meat += &u * u.transpose();
        self.j_count += 1;
        Ok(())
    }

    /// bread * meat * bread.
    pub fn assemble(&self) -> Result<VarianceReport> {
        let bread = self
            .bread
            .as_ref()
            .ok_or(Error::EmptyState("sandwich bread not set"))?;
        if self.j_count < 2 {
            return Err(Error::TooFewClusters { got: self.j_count });
        }
        Ok(VarianceReport {
            sigma: bread * &self.meat * bread,
            method: "cluster-robust".to_string(),
            dof: self.j_count as i64,
            sigma2_hat: None,
        })
    }
}

/// Heteroscedasticity-robust meat accumulated online from standardized
/// one-step prediction errors. Exact HC0 needs final-fit residuals, which
/// would require retaining records; this estimator trades exactness for the
/// streaming contract and is consistent for the same limit.
#[derive(Debug, Clone)]
pub struct HrseAccumulator {
    pub meat: DMatrix<f64>,
    pub n: u64,
}

impl HrseAccumulator {
    pub fn new(k: usize) -> Self {
        HrseAccumulator {
            meat: DMatrix::zeros(k, k),
            n: 0,
        }
    }

    /// Must be called with the state *before* the record's RLS update.
    pub fn update(&mut self, r: &Record, state_before: &RlsState) -> Result<()> {
        let k = self.meat.nrows();
        if r.k() != k || state_before.k() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: r.k(),
            });
        }
        let x = DVector::from_column_slice(&r.x);
        let denom = 1.0 + x.dot(&(&state_before.z_inv * &x));
        if denom <= DEGENERACY_EPS {
            return Err(Error::Degenerate { denom });
        }
        let e = (r.y - x.dot(&state_before.beta)) / denom.sqrt();
        self.meat += &x * x.transpose() * (e * e);
        self.n += 1;
        Ok(())
    }

    pub fn assemble(&self, bread: &DMatrix<f64>) -> Result<VarianceReport> {
        if self.n < 2 {
            return Err(Error::TooFewReplicates {
                got: self.n as usize,
            });
        }
        Ok(VarianceReport {
            sigma: bread * &self.meat * bread,
            method: "hrse".to_string(),
            dof: self.n as i64,
            sigma2_hat: None,
        })
    }
}

/// Streaming co-moments of per-cluster (size, outcome sum) pairs for one
/// treatment arm.
#[derive(Debug, Clone, Default)]
pub struct DeltaMethodAccumulator {
    pub j: usize,
    pub mean_n: f64,
    pub mean_s: f64,
    m2_n: f64,
    m2_s: f64,
    co_sn: f64,
}

impl DeltaMethodAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Absorbs one completed cluster.
    pub fn add_cluster(&mut self, n_j: u64, s_j: f64) {
        self.j += 1;
        let jf = self.j as f64;
        let dn = n_j as f64 - self.mean_n;
        let ds = s_j - self.mean_s;
        self.mean_n += dn / jf;
        self.mean_s += ds / jf;
        let dn2 = n_j as f64 - self.mean_n;
        let ds2 = s_j - self.mean_s;
        self.m2_n += dn * dn2;
        self.m2_s += ds * ds2;
        self.co_sn += ds * dn2;
    }

    pub fn var_n(&self) -> f64 {
        if self.j < 2 {
            0.0
        } else {
            self.m2_n / (self.j - 1) as f64
        }
    }

    pub fn var_s(&self) -> f64 {
        if self.j < 2 {
            0.0
        } else {
            self.m2_s / (self.j - 1) as f64
        }
    }

    pub fn cov_sn(&self) -> f64 {
        if self.j < 2 {
            0.0
        } else {
            self.co_sn / (self.j - 1) as f64
        }
    }

    /// Mean outcome for this arm, as the ratio of sums.
    pub fn arm_mean(&self) -> f64 {
        self.mean_s / self.mean_n
    }

    pub fn total_records(&self) -> f64 {
        self.j as f64 * self.mean_n
    }
}

/// Delta-method variance of the arm mean (a ratio of cluster sums):
///
/// (1 / (J n̄²)) (σ_s² + (s̄/n̄)² σ_n² − 2 (s̄/n̄) σ_{s,n})
pub fn delta_method_variance(acc: &DeltaMethodAccumulator) -> Result<f64> {
    if acc.j < 2 {
        return Err(Error::TooFewClusters { got: acc.j });
    }
    if acc.mean_n <= 0.0 {
        return Err(Error::EmptyState("delta-method arm has no records"));
    }
    let r = acc.mean_s / acc.mean_n;
    let inner = acc.var_s() + r * r * acc.var_n() - 2.0 * r * acc.cov_sn();
    Ok(inner / (acc.j as f64 * acc.mean_n * acc.mean_n))
}

/// Per-arm delta accumulators combined into a diff-in-means effect variance.
#[derive(Debug, Clone, Default)]
pub struct DeltaMethodEffect {
    pub treated: DeltaMethodAccumulator,
    pub control: DeltaMethodAccumulator,
}

impl DeltaMethodEffect {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_cluster(&mut self, treated: bool, n_j: u64, s_j: f64) {
        if treated {
            self.treated.add_cluster(n_j, s_j);
        } else {
            self.control.add_cluster(n_j, s_j);
        }
    }

    pub fn tau_hat(&self) -> Result<f64> {
        if self.treated.j == 0 || self.control.j == 0 {
            return Err(Error::EmptyState("delta-method effect needs both arms"));
        }
        Ok(self.treated.arm_mean() - self.control.arm_mean())
    }

    /// Variance of the effect: sum of the two independent arm variances.
    pub fn variance(&self) -> Result<f64> {
        Ok(delta_method_variance(&self.treated)? + delta_method_variance(&self.control)?)
    }
}
