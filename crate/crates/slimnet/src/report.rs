//! Audit report emitted by the optimizer: what happened to every layer of
//! the input model, plus cost totals.
//!
//! Schema (JSON):
//!
//! ```json
//! {
//!   "config": {
//!     "p": 0.5, "start_threshold": 0.99, "target": "cpu",
//!     "rank_grid": "powers_of_two", "max_chain": 2, "seed": 7
//!   },
//!   "totals": {
//!     "flops_before": 0, "flops_after": 0, "flop_reduction_ratio": 1.0,
//!     "weight_bytes_before": 0, "weight_bytes_after": 0,
//!     "activation_bytes_before": 0, "activation_bytes_after": 0
//!   },
//!   "layers": [
//!     {"name": "conv1", "action": "factorized", "kind": "filter_wise",
//!      "b": 4, "A": 0.98, "R": 0.5, "S": 0.74,
//!      "flops_before": 0, "flops_after": 0, "replacements": ["conv1.f0", "conv1"]}
//!   ]
//! }
//! ```
//!
//! `b`, `A`, `R`, `S`, `replacements` appear only on factorized records
//! (`b` is a two-element array for chained splits); `reason` explains kept
//! representation layers and names the fusion rewrite for fused ones.

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// What the optimizer did with one layer of the input model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Kept,
    Fused,
    Factorized,
}

/// Chosen rank(s): a single integer for base schemes, `[outer, inner]` for
/// chains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RankValue {
    One(usize),
    Many(Vec<usize>),
}

impl RankValue {
    pub fn from_ranks(ranks: &[usize]) -> RankValue {
        if ranks.len() == 1 {
            RankValue::One(ranks[0])
        } else {
            RankValue::Many(ranks.to_vec())
        }
    }

    pub fn as_vec(&self) -> Vec<usize> {
        match self {
            RankValue::One(b) => vec![*b],
            RankValue::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportConfig {
    pub p: f64,
    pub start_threshold: f64,
    pub target: String,
    pub rank_grid: String,
    pub max_chain: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportTotals {
    pub flops_before: u64,
    pub flops_after: u64,
    /// Unbounded speedup ratio `before / after` (1.0 when nothing to do).
    pub flop_reduction_ratio: f64,
    pub weight_bytes_before: u64,
    pub weight_bytes_after: u64,
    pub activation_bytes_before: u64,
    pub activation_bytes_after: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub action: Action,
    /// Layer kind for kept/fused records, candidate kind for factorized
    /// ones (e.g. `filter_wise`, `chain:filter_wise+separable`,
    /// `shared_input:filter_wise`).
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub b: Option<RankValue>,
    #[serde(rename = "A", skip_serializing_if = "Option::is_none", default)]
    pub a: Option<f64>,
    #[serde(rename = "R", skip_serializing_if = "Option::is_none", default)]
    pub r: Option<f64>,
    #[serde(rename = "S", skip_serializing_if = "Option::is_none", default)]
    pub s: Option<f64>,
    pub flops_before: u64,
    pub flops_after: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
    /// Node names in the output model that implement this layer, in graph
    /// order. Shared group factors are listed on (and their FLOPs charged
    /// to) the first member of the group.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub replacements: Option<Vec<String>>,
}

impl LayerRecord {
    pub fn kept(name: &str, kind: &str, flops_before: u64, flops_after: u64) -> LayerRecord {
        LayerRecord {
            name: name.into(),
            action: Action::Kept,
            kind: kind.into(),
            b: None,
            a: None,
            r: None,
            s: None,
            flops_before,
            flops_after,
            reason: None,
            replacements: None,
        }
    }

    pub fn with_reason(mut self, reason: String) -> LayerRecord {
        self.reason = Some(reason);
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub config: ReportConfig,
    pub totals: ReportTotals,
    pub layers: Vec<LayerRecord>,
}

impl OptimizationReport {
    /// Pretty JSON with a trailing newline; field order is fixed, so the
    /// bytes are deterministic.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(bytes: &[u8]) -> Result<OptimizationReport> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn record(&self, name: &str) -> Option<&LayerRecord> {
        self.layers.iter().find(|l| l.name == name)
    }
}
