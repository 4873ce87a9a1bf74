//! Recursive least squares with a running inverse Gram matrix.
//!
//! The retained state is O(k^2): coefficient vector, inverse of X'X kept
//! current through rank-one (Sherman-Morrison) updates, and the running sum
//! of squared residuals. Raw records are only held during the batch
//! initialization phase.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::record::{Record, StreamConfig};

/// Denominators at or below this threshold abort an update as numerically
/// degenerate.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// The entire retained knowledge of a regression stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    pub beta: DVector<f64>,
    /// Running (X'X)^-1, symmetrized after every update.
    pub z_inv: DMatrix<f64>,
    /// Running sum of squared residuals.
    pub ssr: f64,
    pub n_seen: u64,
}

impl RlsState {
    pub fn k(&self) -> usize {
        self.beta.len()
    }

    /// Residual at the current fit for a feature/outcome pair, using the
    /// sign convention e = x'beta - y.
    pub fn residual(&self, x: &[f64], y: f64) -> f64 {
        let xv = DVector::from_column_slice(x);
        self.beta.dot(&xv) - y
    }

    /// Folds one record into the state: SSR first (with the pre-update
    /// quantities), then the inverse Gram, then the coefficients.
    pub fn update(&mut self, r: &Record) -> Result<()> {
        let k = self.k();
        if r.k() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: r.k(),
            });
        }
        let x = DVector::from_column_slice(&r.x);
        let zx = &self.z_inv * &x;
        let denom = 1.0 + x.dot(&zx);
        if denom <= DEGENERACY_EPS {
            return Err(Error::Degenerate { denom });
        }
        let pred_err = x.dot(&self.beta) - r.y;
        self.ssr += pred_err * pred_err / denom;

        // Z <- Z - Z x x' Z / (1 + x' Z x), then re-symmetrize
        let outer = &zx * zx.transpose();
        self.z_inv -= outer / denom;
        symmetrize(&mut self.z_inv);

        // beta <- beta + Z' x (y - x' beta), with the updated Z
        let gain = &self.z_inv * &x;
        self.beta += gain * (-pred_err);
        self.n_seen += 1;
        Ok(())
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Solves the normal equations on a buffer of records by pivoted LU,
/// producing the initial state for the recursion.
pub fn rls_init(buffer: &[impl AsRef<Record>]) -> Result<RlsState> {
    let m = buffer.len();
    if m == 0 {
        return Err(Error::EmptyState("empty initialization buffer"));
    }
    let k = buffer[0].as_ref().k();
    if m < k {
        return Err(Error::NotIdentifiable { buffered: m });
    }
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    for item in buffer {
        let r = item.as_ref();
        if r.k() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: r.k(),
            });
        }
        let x = DVector::from_column_slice(&r.x);
        xtx += &x * x.transpose();
        xty += &x * r.y;
    }
    let lu = xtx.clone().lu();
    if !lu_is_invertible(&lu) {
        return Err(Error::NotIdentifiable { buffered: m });
    }
    let beta = lu
        .solve(&xty)
        .ok_or(Error::NotIdentifiable { buffered: m })?;
    let mut z_inv = xtx
        .lu()
        .try_inverse()
        .ok_or(Error::NotIdentifiable { buffered: m })?;
    symmetrize(&mut z_inv);
    let mut ssr = 0.0;
    for item in buffer {
        let r = item.as_ref();
        let x = DVector::from_column_slice(&r.x);
        let e = x.dot(&beta) - r.y;
        ssr += e * e;
    }
    Ok(RlsState {
        beta,
        z_inv,
        ssr,
        n_seen: m as u64,
    })
}

fn lu_is_invertible(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> bool {
    let u = lu.u();
    let mut max_pivot: f64 = 0.0;
    let mut min_pivot = f64::INFINITY;
    for i in 0..u.nrows().min(u.ncols()) {
        let p = u[(i, i)].abs();
        max_pivot = max_pivot.max(p);
        min_pivot = min_pivot.min(p);
    }
    max_pivot > 0.0 && min_pivot > 1e-10 * max_pivot
}

/// Estimated covariance of the fitted coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub sigma: DMatrix<f64>,
    pub method: String,
    pub dof: i64,
    pub sigma2_hat: Option<f64>,
}

impl VarianceReport {
    /// Standard error of the coefficient at `idx` (1 = treatment effect).
    pub fn se(&self, idx: usize) -> f64 {
        self.sigma[(idx, idx)].max(0.0).sqrt()
    }
}

/// Classical variance under i.i.d. errors: sigma^2 (X'X)^-1, with the
/// residual variance divisor selected by the stream configuration.
pub fn iid_variance(state: &RlsState, cfg: &StreamConfig) -> Result<VarianceReport> {
    let n = state.n_seen as usize;
    let k = state.k();
    let dof = cfg.df_divisor.dof(n, k);
    if dof <= 0 {
        return Err(Error::InsufficientDof { n, k });
    }
    let sigma2 = state.ssr / dof as f64;
    Ok(VarianceReport {
        sigma: &state.z_inv * sigma2,
        method: "iid".to_string(),
        dof,
        sigma2_hat: Some(sigma2),
    })
}

/// Streaming driver around the initialization buffer and the recursion.
///
/// Generic over anything that can be viewed as a [`Record`] so callers can
/// hand in instrumented wrappers; items are only retained while buffered for
/// initialization and dropped the moment the batch fit completes.
#[derive(Debug)]
pub struct RlsStream<R: AsRef<Record> = Record> {
    cfg: StreamConfig,
    buffer: Vec<R>,
    buffer_cap: usize,
    state: Option<RlsState>,
}

impl<R: AsRef<Record>> RlsStream<R> {
    pub fn new(cfg: StreamConfig) -> Result<Self> {
        cfg.validate()?;
        let target = cfg.init_m.max(cfg.k);
        Ok(RlsStream {
            cfg,
            buffer: Vec::new(),
            buffer_cap: (2 * target).max(target + 16),
            state: None,
        })
    }

    /// Maximum records held while waiting for an invertible design.
    pub fn with_buffer_cap(mut self, cap: usize) -> Self {
        self.buffer_cap = cap.max(self.init_target());
        self
    }

    fn init_target(&self) -> usize {
        self.cfg.init_m.max(self.cfg.k)
    }

    pub fn push(&mut self, item: R) -> Result<()> {
        self.cfg.check_record(item.as_ref())?;
        if let Some(state) = &mut self.state {
            return state.update(item.as_ref());
        }
        self.buffer.push(item);
        if self.buffer.len() >= self.init_target() {
            match rls_init(&self.buffer) {
                Ok(state) => {
                    self.state = Some(state);
                    self.buffer.clear();
                    self.buffer.shrink_to_fit();
                }
                Err(Error::NotIdentifiable { .. }) if self.buffer.len() < self.buffer_cap => {
                    // design still singular: keep buffering
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn initialized(&self) -> bool {
        self.state.is_some()
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn state(&self) -> Option<&RlsState> {
        self.state.as_ref()
    }

    /// Consumes the stream, returning the fitted state.
    pub fn finish(self) -> Result<RlsState> {
        self.state.ok_or(Error::NotIdentifiable {
            buffered: self.buffer.len(),
        })
    }
}
