//! Scalar design objective and the FLOP-budget feasibility gate.
//!
//! The score balances accuracy against size and compute,
//! `20 * log10(a^kappa / (p^beta * c^gamma))`, with `a` in percent, `p` in
//! millions of parameters and `c` in billions of FLOPs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParams {
    pub kappa: f64,
    pub beta: f64,
    pub gamma: f64,
    pub budget_flops: u64,
    pub tolerance: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self { kappa: 2.0, beta: 0.5, gamma: 0.5, budget_flops: 100_000_000, tolerance: 0.05 }
    }
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let positive = [("kappa", self.kappa), ("beta", self.beta), ("gamma", self.gamma)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ObjectiveError::InvalidParam(name));
            }
        }
        if self.budget_flops == 0 {
            return Err(ObjectiveError::InvalidParam("budget_flops"));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(ObjectiveError::InvalidParam("tolerance"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy_pct: f64,
    pub params_millions: f64,
    pub flops_billions: f64,
}

impl Metrics {
    pub fn from_counts(accuracy_pct: f64, params: u64, flops: u64) -> Self {
        Self { accuracy_pct, params_millions: params as f64 / 1e6, flops_billions: flops as f64 / 1e9 }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("{name} must be positive, got {value}")]
    Domain { name: &'static str, value: f64 },
    #[error("accuracy above 100%: {0}")]
    AccuracyRange(f64),
    #[error("invalid objective parameter `{0}`")]
    InvalidParam(&'static str),
}

pub fn netscore(m: &Metrics, o: &ObjectiveParams) -> Result<f64, ObjectiveError> {
    let fields = [("accuracy", m.accuracy_pct), ("params", m.params_millions), ("flops", m.flops_billions)];
    for (name, value) in fields {
        if !(value > 0.0 && value.is_finite()) {
            return Err(ObjectiveError::Domain { name, value });
        }
    }
    if m.accuracy_pct > 100.0 {
        return Err(ObjectiveError::AccuracyRange(m.accuracy_pct));
    }
    // log10 of the ratio, term by term
    let log = o.kappa * m.accuracy_pct.log10()
        - o.beta * m.params_millions.log10()
        - o.gamma * m.flops_billions.log10();
    Ok(20.0 * log)
}

/// True when `flops` is within the relative tolerance of the budget,
/// boundaries included.
pub fn indicator(flops: u64, o: &ObjectiveParams) -> bool {
    let deviation = (flops as f64 - o.budget_flops as f64).abs();
    // relative slack of 1e-9 absorbs rounding in tolerance * budget
    deviation <= o.tolerance * o.budget_flops as f64 + 1e-9 * o.budget_flops as f64
}

/// Relative deviation from the budget, `|flops - budget| / budget`.
pub fn budget_deviation(flops: u64, o: &ObjectiveParams) -> f64 {
    (flops as f64 - o.budget_flops as f64).abs() / o.budget_flops as f64
}

/// Feasible entries first, then by descending score, then ascending id.
fn rank_order<K: Ord>(a: &(K, f64, bool), b: &(K, f64, bool)) -> Ordering {
    b.2.cmp(&a.2).then_with(|| b.1.total_cmp(&a.1)).then_with(|| a.0.cmp(&b.0))
}

/// Orders already-scored entries. Failed evaluations can be passed with a
/// score of negative infinity.
pub fn rank_scores<K: Ord + Clone>(entries: &[(K, f64, bool)]) -> Vec<K> {
    let mut sorted: Vec<&(K, f64, bool)> = entries.iter().collect();
    sorted.sort_by(|a, b| rank_order(a, b));
    sorted.into_iter().map(|e| e.0.clone()).collect()
}

pub fn rank<K: Ord + Clone>(
    candidates: &[(K, Metrics, bool)],
    o: &ObjectiveParams,
) -> Result<Vec<K>, ObjectiveError> {
    let scored = candidates
        .iter()
        .map(|(id, m, feasible)| Ok((id.clone(), netscore(m, o)?, *feasible)))
        .collect::<Result<Vec<_>, ObjectiveError>>()?;
    Ok(rank_scores(&scored))
}
