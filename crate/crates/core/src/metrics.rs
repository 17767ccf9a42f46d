//! Held-out evaluation: accuracy and perplexity.
//!
//! Perplexity uses base-2 exponentiation of the mean negative log2
//! probability assigned to the realized targets; probabilities are floored at
//! [`PROB_FLOOR`] before the log. Cross-entropy elsewhere in the crate stays
//! in natural log; base 2 appears only at this reporting boundary.

use crate::error::{Error, Result};
use crate::model::ProbMatrix;
use serde::{Deserialize, Serialize};

/// Floor applied to target probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Accuracy,
    Perplexity,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Perplexity => "perplexity",
        })
    }
}

/// One evaluation result, attached to the round it was measured after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: MetricKind,
    pub value: f64,
    pub sample_count: usize,
    pub round: u64,
}

fn check_targets(probs: &ProbMatrix, targets: &[usize]) -> Result<()> {
    if probs.rows == 0 {
        return Err(Error::Domain("cannot evaluate an empty prediction matrix".into()));
    }
    if probs.rows != targets.len() {
        return Err(Error::Structural(format!(
            "{} prediction rows but {} targets",
            probs.rows,
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= probs.cols) {
        return Err(Error::Data(format!("target id {t} out of range for {} columns", probs.cols)));
    }
    Ok(())
}

/// Fraction of rows whose argmax equals the target. Ties resolve to the
/// lowest class index.
pub fn accuracy(probs: &ProbMatrix, targets: &[usize]) -> Result<f64> {
    check_targets(probs, targets)?;
    let mut hits = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        let row = probs.row(i);
        let mut best = 0usize;
        for (j, &p) in row.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::Numeric(format!("non-finite probability in row {i}")));
            }
            if p > row[best] {
                best = j;
            }
        }
        if best == t {
            hits += 1;
        }
    }
    Ok(hits as f64 / targets.len() as f64)
}

/// `2^(-(1/N) * sum log2 p(target))` with probabilities floored at
/// [`PROB_FLOOR`]. A uniform predictor over V outputs scores exactly V.
pub fn perplexity(probs: &ProbMatrix, targets: &[usize]) -> Result<f64> {
    check_targets(probs, targets)?;
    let mut bits = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let p = probs.row(i)[t];
        if !p.is_finite() {
            return Err(Error::Numeric(format!("non-finite probability in row {i}")));
        }
        bits -= p.max(PROB_FLOOR).log2();
    }
    let ppl = (bits / targets.len() as f64).exp2();
    if !ppl.is_finite() {
        return Err(Error::Numeric("perplexity overflowed".into()));
    }
    Ok(ppl)
}
