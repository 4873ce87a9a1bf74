//! Single-pass streaming drivers tying the estimators together.
//!
//! Every driver consumes its input one item at a time and drops each item
//! before pulling the next, so a counting wrapper around the source can
//! verify that at most max(init_m, 1) raw records are ever live. The drivers
//! are generic over anything viewable as a [`Record`] for exactly that
//! reason.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::bootstrap::{
    summarize_estimates, summarize_means, BootstrapMeanEnsemble, BootstrapRlsStream,
    BootstrapSummary,
};
use crate::error::{Error, Result};
use crate::mean::{pate_transform, EffectEstimate, RecursiveMean};
use crate::record::{Record, StreamConfig};
use crate::report::{
    Warning, WARN_BOOTSTRAP_INIT, WARN_DEGENERATE_ARMS, WARN_HRSE_APPROXIMATE,
};
use crate::rls::{iid_variance, RlsState, RlsStream, VarianceReport};
use crate::robust::HrseAccumulator;
use crate::rng::WeightGenerator;

/// Two-sided normal critical value for a confidence level.
pub fn normal_critical(level: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    n.inverse_cdf(0.5 + level / 2.0)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ArmCounts {
    pub treated: u64,
    pub control: u64,
}

impl ArmCounts {
    pub fn observe(&mut self, r: &Record) {
        if r.treated() {
            self.treated += 1;
        } else {
            self.control += 1;
        }
    }

    pub fn degenerate(&self) -> bool {
        self.treated == 0 || self.control == 0
    }

    pub fn n(&self) -> u64 {
        self.treated + self.control
    }

    fn warn_if_degenerate(&self, warnings: &mut Vec<Warning>) {
        if self.degenerate() {
            warnings.push(Warning::new(
                WARN_DEGENERATE_ARMS,
                format!(
                    "stream has {} treated and {} control records; \
                     variance unavailable",
                    self.treated, self.control
                ),
            ));
        }
    }
}

/// Result of one streaming analysis, ready to be rendered as a report.
#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub estimate: EffectEstimate,
    pub variance: Option<VarianceReport>,
    pub summary: Option<BootstrapSummary>,
    pub warnings: Vec<Warning>,
}

/// Running mean of the raw outcome column.
pub fn run_outcome_mean<R: AsRef<Record>>(
    items: impl IntoIterator<Item = R>,
) -> Result<RecursiveMean> {
    let mut mean = RecursiveMean::new();
    for item in items {
        mean.update(item.as_ref().y)?;
    }
    if mean.is_empty() {
        return Err(Error::EmptyState("empty input stream"));
    }
    Ok(mean)
}

/// Inverse-probability-weighted effect estimate from a single pass.
pub fn run_pate<R: AsRef<Record>>(
    items: impl IntoIterator<Item = R>,
    cfg: &StreamConfig,
) -> Result<AnalysisOutput> {
    cfg.validate()?;
    let mut mean = RecursiveMean::new();
    let mut arms = ArmCounts::default();
    for item in items {
        let r = item.as_ref();
        cfg.check_record(r)?;
        arms.observe(r);
        mean.update(pate_transform(r, cfg))?;
    }
    if mean.is_empty() {
        return Err(Error::EmptyState("empty input stream"));
    }
    let mut warnings = Vec::new();
    arms.warn_if_degenerate(&mut warnings);
    let estimate = crate::mean::pate_point_estimate(&mean)?;
    Ok(AnalysisOutput {
        estimate,
        variance: None,
        summary: None,
        warnings,
    })
}

/// Which covariance estimator accompanies the RLS fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMethod {
    #[default]
    Iid,
    Hrse,
}

/// Full RLS pass: coefficients, chosen variance estimator, and a CI on the
/// treatment coefficient.
pub fn run_rls<R: AsRef<Record>>(
    items: impl IntoIterator<Item = R>,
    cfg: &StreamConfig,
    method: VarianceMethod,
    level: f64,
) -> Result<AnalysisOutput> {
    let (state, variance, arms, mut warnings) = run_rls_state(items, cfg, method)?;
    arms.warn_if_degenerate(&mut warnings);
    let estimate = effect_from_variance(&state, variance.as_ref(), arms, level);
    Ok(AnalysisOutput {
        estimate,
        variance,
        summary: None,
        warnings,
    })
}

/// RLS pass returning the raw fitted state; used by the federated runner,
/// which assembles its own variance.
pub fn run_rls_state<R: AsRef<Record>>(
    items: impl IntoIterator<Item = R>,
    cfg: &StreamConfig,
    method: VarianceMethod,
) -> Result<(RlsState, Option<VarianceReport>, ArmCounts, Vec<Warning>)> {
    cfg.validate()?;
    let mut stream: RlsStream<R> = RlsStream::new(cfg.clone())?;
    let mut hrse = match method {
        VarianceMethod::Hrse => Some(HrseAccumulator::new(cfg.k)),
        VarianceMethod::Iid => None,
    };
    let mut arms = ArmCounts::default();
    for item in items {
        let r = item.as_ref();
        arms.observe(r);
        // HRSE uses the pre-update state; records consumed by the
        // initialization buffer contribute nothing to the meat.
        if let (Some(acc), Some(state)) = (hrse.as_mut(), stream.state()) {
            acc.update(r, state)?;
        }
        stream.push(item)?;
    }
    let state = stream.finish()?;
    let mut warnings = Vec::new();
    let variance = if arms.degenerate() {
        None
    } else {
        match method {
            VarianceMethod::Iid => Some(iid_variance(&state, cfg)?),
            VarianceMethod::Hrse => {
                warnings.push(Warning::new(
                    WARN_HRSE_APPROXIMATE,
                    "robust meat accumulated from standardized recursive residuals; \
                     agreement with batch HC0 is statistical, not exact",
                ));
                Some(hrse.unwrap().assemble(&state.z_inv)?)
            }
        }
    };
    Ok((state, variance, arms, warnings))
}

fn effect_from_variance(
    state: &RlsState,
    variance: Option<&VarianceReport>,
    arms: ArmCounts,
    level: f64,
) -> EffectEstimate {
    let tau_hat = state.beta[1];
    let (se, ci_low, ci_high) = match variance {
        Some(v) => {
            let se = v.se(1);
            let z = normal_critical(level);
            (Some(se), Some(tau_hat - z * se), Some(tau_hat + z * se))
        }
        None => (None, None, None),
    };
    EffectEstimate {
        tau_hat,
        se,
        ci_low,
        ci_high,
        n: arms.n(),
        method: match variance {
            Some(v) => format!("rls-{}", v.method),
            None => "rls".to_string(),
        },
    }
}

/// Online bootstrap of the effect estimate (i.i.d. or cluster-seeded weights
/// depending on the generator's mode).
pub fn run_bootstrap_pate<R: AsRef<Record>>(
    items: impl IntoIterator<Item = R>,
    cfg: &StreamConfig,
    gen: &WeightGenerator,
    b_count: usize,
    level: f64,
) -> Result<AnalysisOutput> {
    cfg.validate()?;
    if b_count < 2 {
        return Err(Error::TooFewReplicates { got: b_count });
    }
    let mut ens = BootstrapMeanEnsemble::new(b_count);
    let mut point = RecursiveMean::new();
    let mut arms = ArmCounts::default();
    for item in items {
        let r = item.as_ref();
        cfg.check_record(r)?;
        arms.observe(r);
        point.update(pate_transform(r, cfg))?;
        ens.step(r, gen, cfg)?;
    }
    if point.is_empty() {
        return Err(Error::EmptyState("empty input stream"));
    }
    let summary = summarize_means(&ens, level)?;
    let mut warnings = Vec::new();
    arms.warn_if_degenerate(&mut warnings);
    let se = summary.variance.sqrt();
    let estimate = EffectEstimate {
        tau_hat: point.mean,
        se: Some(se),
        ci_low: Some(summary.percentile_ci.0),
        ci_high: Some(summary.percentile_ci.1),
        n: arms.n(),
        method: match gen.mode {
            crate::rng::WeightMode::Iid => "pate-bootstrap".to_string(),
            crate::rng::WeightMode::ClusterSeeded => "pate-cluster-bootstrap".to_string(),
        },
    };
    Ok(AnalysisOutput {
        estimate,
        variance: None,
        summary: Some(summary),
        warnings,
    })
}

/// Online bootstrap of the regression treatment coefficient via weighted
/// RLS replicates.
pub fn run_bootstrap_rls<R: AsRef<Record>>(
    items: impl IntoIterator<Item = R>,
    cfg: &StreamConfig,
    gen: &WeightGenerator,
    b_count: usize,
    level: f64,
) -> Result<AnalysisOutput> {
    cfg.validate()?;
    let mut boot: BootstrapRlsStream<R> = BootstrapRlsStream::new(cfg.clone(), gen.clone(), b_count)?;
    let mut arms = ArmCounts::default();
    // the point estimate comes from the replicate average; a plain unweighted
    // stream would need a second copy of every record
    for item in items {
        arms.observe(item.as_ref());
        boot.push(item)?;
    }
    if !boot.initialized() {
        return Err(Error::NotIdentifiable {
            buffered: boot.records_seen() as usize,
        });
    }
    let estimates = boot.coefficient_estimates(1);
    let summary = summarize_estimates(&estimates, level)?;
    let mut warnings = Vec::new();
    arms.warn_if_degenerate(&mut warnings);
    let frac = boot.init_fraction();
    warnings.push(Warning::new(
        WARN_BOOTSTRAP_INIT,
        format!(
            "replicates share initialization on the first {:.1}% of records; \
             bootstrap variance is understated by roughly that share",
            100.0 * frac
        ),
    ));
    let tau_hat = estimates.iter().sum::<f64>() / estimates.len() as f64;
    let estimate = EffectEstimate {
        tau_hat,
        se: Some(summary.variance.sqrt()),
        ci_low: Some(summary.percentile_ci.0),
        ci_high: Some(summary.percentile_ci.1),
        n: arms.n(),
        method: "rls-bootstrap".to_string(),
    };
    Ok(AnalysisOutput {
        estimate,
        variance: None,
        summary: Some(summary),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DgpSpec;
    use crate::rng::WeightMode;
    use approx::assert_relative_eq;

    #[test]
    fn critical_value_for_95() {
        assert_relative_eq!(normal_critical(0.95), 1.959964, epsilon = 1e-5);
    }

    #[test]
    fn pate_on_worked_stream() {
        let cfg = StreamConfig::new(2, 0.5, 0).unwrap();
        let records = vec![
            Record::from_parts(2.0, 1, &[], None).unwrap(),
            Record::from_parts(1.0, 0, &[], None).unwrap(),
        ];
        let out = run_pate(records, &cfg).unwrap();
        assert_eq!(out.estimate.tau_hat, 1.0);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn degenerate_arm_flagged_but_estimated() {
        let cfg = StreamConfig::new(2, 0.5, 0).unwrap();
        let records: Vec<Record> = (0..5)
            .map(|i| Record::from_parts(i as f64, 1, &[], None).unwrap())
            .collect();
        let out = run_pate(records, &cfg).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.warnings[0].code, WARN_DEGENERATE_ARMS);
    }

    #[test]
    fn empty_stream_is_an_error() {
        let cfg = StreamConfig::new(2, 0.5, 0).unwrap();
        assert!(run_pate(Vec::<Record>::new(), &cfg).is_err());
    }

    #[test]
    fn rls_recovers_effect_with_ci() {
        let spec = DgpSpec::new(3000, 3, 1.5, 0.5, 1.0, 21);
        let records = spec.generate().unwrap();
        let cfg = StreamConfig::new(3, 0.5, 30).unwrap();
        let out = run_rls(records, &cfg, VarianceMethod::Iid, 0.95).unwrap();
        let est = &out.estimate;
        assert!((est.tau_hat - 1.5).abs() < 0.2);
        assert!(est.ci_low.unwrap() < est.tau_hat && est.tau_hat < est.ci_high.unwrap());
        assert_eq!(est.method, "rls-iid");
    }

    #[test]
    fn bootstrap_pate_deterministic_given_seed() {
        let spec = DgpSpec::new(400, 2, 1.0, 0.5, 1.0, 31);
        let cfg = StreamConfig::new(2, 0.5, 0).unwrap();
        let gen = WeightGenerator::new(5, WeightMode::Iid);
        let a = run_bootstrap_pate(spec.generate().unwrap(), &cfg, &gen, 50, 0.95).unwrap();
        let b = run_bootstrap_pate(spec.generate().unwrap(), &cfg, &gen, 50, 0.95).unwrap();
        assert_eq!(a.estimate.tau_hat.to_bits(), b.estimate.tau_hat.to_bits());
        assert_eq!(
            a.summary.unwrap().variance.to_bits(),
            b.summary.unwrap().variance.to_bits()
        );
    }

    #[test]
    fn bootstrap_rls_warns_about_init_share() {
        let spec = DgpSpec::new(300, 2, 1.0, 0.5, 1.0, 41);
        let cfg = StreamConfig::new(2, 0.5, 20).unwrap();
        let gen = WeightGenerator::new(9, WeightMode::Iid);
        let out = run_bootstrap_rls(spec.generate().unwrap(), &cfg, &gen, 50, 0.95).unwrap();
        assert!(out
            .warnings
            .iter()
            .any(|w| w.code == WARN_BOOTSTRAP_INIT));
    }
}
