//! Modified Laplace Log Likelihood and cohort reports.
//!
//! For a prediction with confidence σ:
//!
//! ```text
//! σ_clipped = max(σ, 70)
//! Δ         = min(|FVC_true − FVC_predicted|, 1000)
//! L         = −√2·Δ / σ_clipped − ln(√2·σ_clipped)
//! ```
//!
//! Higher (less negative) is better. Everything is evaluated in f64.

use std::f64::consts::SQRT_2;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to σ before scoring, in ml.
pub const SIGMA_FLOOR: f64 = 70.0;
/// Cap applied to the absolute error before scoring, in ml.
pub const ERROR_CAP: f64 = 1000.0;

/// Published challenge scores, shown next to a run's own score.
pub const REFERENCE_SCORES: [(&str, f64); 4] = [
    ("Kaggle 1st place", -6.8305),
    ("Kaggle 2nd place", -6.8311),
    ("Kaggle 3rd place", -6.8336),
    ("Fibrosis-Net", -6.8188),
];

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("non-finite input: true {fvc_true}, predicted {fvc_predicted}, sigma {sigma}")]
    NonFiniteInput {
        fvc_true: f64,
        fvc_predicted: f64,
        sigma: f64,
    },
    #[error("no predictions to score")]
    EmptyInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub fvc_true: f64,
    pub fvc_predicted: f64,
    pub sigma: f64,
}

impl ScoredPrediction {
    pub fn new(fvc_true: f64, fvc_predicted: f64, sigma: f64) -> Self {
        Self {
            fvc_true,
            fvc_predicted,
            sigma,
        }
    }
}

pub fn laplace_log_likelihood(p: &ScoredPrediction) -> Result<f64, ScoringError> {
    if !(p.fvc_true.is_finite() && p.fvc_predicted.is_finite() && p.sigma.is_finite()) {
        return Err(ScoringError::NonFiniteInput {
            fvc_true: p.fvc_true,
            fvc_predicted: p.fvc_predicted,
            sigma: p.sigma,
        });
    }
    let sigma = p.sigma.max(SIGMA_FLOOR);
    let delta = (p.fvc_true - p.fvc_predicted).abs().min(ERROR_CAP);
    Ok(-SQRT_2 * delta / sigma - (SQRT_2 * sigma).ln())
}

/// Unweighted mean score over all evaluation points.
pub fn score_cohort(predictions: &[ScoredPrediction]) -> Result<f64, ScoringError> {
    if predictions.is_empty() {
        return Err(ScoringError::EmptyInput);
    }
    let total = predictions
        .iter()
        .map(laplace_log_likelihood)
        .sum::<Result<f64, _>>()?;
    Ok(total / predictions.len() as f64)
}

/// The σ that maximises the score for a fixed absolute error.
pub fn optimal_sigma(delta: f64) -> f64 {
    (SQRT_2 * delta).max(SIGMA_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub laplace_log_likelihood: f64,
}

/// A method comparison table: the scored run plus the reference rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n_predictions: usize,
    pub rows: Vec<ReportRow>,
}

impl ScoreReport {
    pub fn new(method: &str, predictions: &[ScoredPrediction]) -> Result<Self, ScoringError> {
        let score = score_cohort(predictions)?;
        let mut rows: Vec<ReportRow> = REFERENCE_SCORES
            .iter()
            .map(|&(m, s)| ReportRow {
                method: format!("{m} (reference)"),
                laplace_log_likelihood: s,
            })
            .collect();
        rows.push(ReportRow {
            method: method.to_string(),
            laplace_log_likelihood: score,
        });
        Ok(Self {
            n_predictions: predictions.len(),
            rows,
        })
    }

    /// Score of the evaluated method (the last row).
    pub fn score(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.laplace_log_likelihood)
    }

    /// Two-column text table: method, Laplace Log Likelihood.
    pub fn render_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .chain(["Method".len()])
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  Laplace Log Likelihood", "Method");
        let _ = writeln!(out, "{}  {}", "-".repeat(width), "-".repeat(22));
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:.5}", r.method, r.laplace_log_likelihood);
        }
        out
    }
}
