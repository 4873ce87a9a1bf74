use crate::error::{Error, Result};

/// One observation from the experiment stream.
///
/// The feature vector is laid out as `[1, d, covariates...]`: a constant
/// intercept, the binary treatment indicator, then any pre-treatment
/// covariates. Records are meant to be dropped immediately after they are
/// folded into a running state.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub y: f64,
    pub x: Vec<f64>,
    pub cluster_id: Option<Vec<u8>>,
}

impl Record {
    /// Builds a record from outcome, treatment indicator, and covariates,
    /// prepending the intercept.
    pub fn from_parts(
        y: f64,
        d: u8,
        covariates: &[f64],
        cluster_id: Option<Vec<u8>>,
    ) -> Result<Self> {
        let mut x = Vec::with_capacity(2 + covariates.len());
        x.push(1.0);
        x.push(d as f64);
        x.extend_from_slice(covariates);
        Self::new(y, x, cluster_id)
    }

    pub fn new(y: f64, x: Vec<f64>, cluster_id: Option<Vec<u8>>) -> Result<Self> {
        if !y.is_finite() {
            return Err(Error::NonFinite("outcome y"));
        }
        if x.len() < 2 {
            return Err(Error::InvalidRecord(format!(
                "feature vector must have at least intercept and treatment, got length {}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector entry"));
        }
        if x[0] != 1.0 {
            return Err(Error::InvalidRecord(format!(
                "x[0] must be the intercept 1, got {}",
                x[0]
            )));
        }
        if x[1] != 0.0 && x[1] != 1.0 {
            return Err(Error::InvalidRecord(format!(
                "x[1] must be the binary treatment indicator, got {}",
                x[1]
            )));
        }
        Ok(Record { y, x, cluster_id })
    }

    /// Treatment indicator.
    pub fn d(&self) -> f64 {
        self.x[1]
    }

    pub fn k(&self) -> usize {
        self.x.len()
    }

    pub fn treated(&self) -> bool {
        self.x[1] == 1.0
    }
}

impl AsRef<Record> for Record {
    fn as_ref(&self) -> &Record {
        self
    }
}

/// Divisor used for the residual-variance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DfDivisor {
    /// n - k, where k counts every column including the intercept.
    #[default]
    NMinusK,
    /// n - k - 1, the convention some texts print when k excludes the
    /// intercept.
    NMinusKMinus1,
}

impl DfDivisor {
    pub fn dof(self, n: usize, k: usize) -> i64 {
        match self {
            DfDivisor::NMinusK => n as i64 - k as i64,
            DfDivisor::NMinusKMinus1 => n as i64 - k as i64 - 1,
        }
    }
}

/// Stream-level configuration shared by the estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    /// Feature count including intercept and treatment indicator.
    pub k: usize,
    /// Treatment assignment probability, strictly inside (0, 1).
    pub pi1: f64,
    /// Number of records buffered for batch initialization of RLS.
    pub init_m: usize,
    pub df_divisor: DfDivisor,
}

impl StreamConfig {
    pub fn new(k: usize, pi1: f64, init_m: usize) -> Result<Self> {
        let cfg = StreamConfig {
            k,
            pi1,
            init_m,
            df_divisor: DfDivisor::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_df_divisor(mut self, df: DfDivisor) -> Self {
        self.df_divisor = df;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!(
                "k must be >= 2 (intercept + treatment), got {}",
                self.k
            )));
        }
        if !(self.pi1 > 0.0 && self.pi1 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "pi1 must lie in (0, 1), got {}",
                self.pi1
            )));
        }
        if self.init_m != 0 && self.init_m < self.k {
            return Err(Error::InvalidConfig(format!(
                "init_m must be 0 or >= k = {}, got {}",
                self.k, self.init_m
            )));
        }
        Ok(())
    }

    /// Checks a record against this stream's dimensions.
    pub fn check_record(&self, r: &Record) -> Result<()> {
        if r.k() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: r.k(),
            });
        }
        Ok(())
    }
}
