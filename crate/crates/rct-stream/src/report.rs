//! JSON report schema emitted by the CLI. Schema version 1.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub code: String,
    pub message: String,
}

impl Warning {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Warning {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

pub const WARN_DEGENERATE_ARMS: &str = "DEGENERATE_TREATMENT_ARMS";
pub const WARN_BOOTSTRAP_INIT: &str = "BOOTSTRAP_INIT_UNDERSTATES_VARIANCE";
pub const WARN_HRSE_APPROXIMATE: &str = "HRSE_RECURSIVE_RESIDUALS";
pub const WARN_PARTIAL_QUORUM: &str = "PARTIAL_QUORUM";

/// Top-level analysis report, one per CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub method: String,
    pub n: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_effective: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dof: Option<i64>,
    pub warnings: Vec<Warning>,
    /// Oracle comparison deltas, present only under --verify.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<serde_json::Value>,
}

impl Report {
    pub fn new(method: &str, n: u64) -> Self {
        Report {
            schema: 1,
            method: method.to_string(),
            n,
            tau_hat: None,
            se: None,
            ci: None,
            b_effective: None,
            dof: None,
            warnings: Vec::new(),
            verify: None,
        }
    }
}
