//! Linear regressors on clinical metadata.
//!
//! [`fit_elastic_net`] minimises
//!
//! ```text
//! (1/2n)·Σ(yᵢ − β₀ − β·xᵢ)² + λ·(α‖β‖₁ + (1−α)/2·‖β‖₂²)
//! ```
//!
//! on standardised features by cyclic coordinate descent with
//! soft-thresholding. [`fit_quantile`] fits one linear model per quantile by
//! subgradient descent on the pinball loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RegressError {
    #[error("need at least one sample")]
    NoSamples,
    #[error("row {row} has {got} features, expected {expected}")]
    RaggedRows { row: usize, got: usize, expected: usize },
    #[error("{rows} rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("non-finite value in the inputs")]
    NonFinite,
    #[error("invalid hyperparameter: {0}")]
    InvalidParam(String),
}

pub type Result<T> = std::result::Result<T, RegressError>;

fn check_design(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return Err(RegressError::NoSamples);
    }
    if x.len() != y.len() {
        return Err(RegressError::LengthMismatch {
            rows: x.len(),
            targets: y.len(),
        });
    }
    let p = x[0].len();
    for (row, r) in x.iter().enumerate() {
        if r.len() != p {
            return Err(RegressError::RaggedRows {
                row,
                got: r.len(),
                expected: p,
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(RegressError::NonFinite);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(RegressError::NonFinite);
    }
    Ok(p)
}

/// Column means and population standard deviations; a constant column gets
/// a unit scale so it standardises to zeros.
pub fn column_stats(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let p = x.first().map_or(0, Vec::len);
    let means: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let stds = (0..p)
        .map(|j| {
            let var = x.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (means, stds)
}

/// `sign(z)·max(|z| − γ, 0)`.
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetParams {
    pub lambda: f64,
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ElasticNetParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.5,
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetModel {
    /// Coefficients on standardised features.
    pub coefficients: Vec<f64>,
    /// Mean of the training targets (the fit is centred).
    pub intercept: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub converged: bool,
}

impl ElasticNetModel {
    pub fn standardize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.feature_means.iter().zip(&self.feature_stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Coefficients and intercept in the original feature units.
    pub fn original_scale(&self) -> (Vec<f64>, f64) {
        let beta: Vec<f64> = self
            .coefficients
            .iter()
            .zip(&self.feature_stds)
            .map(|(b, s)| b / s)
            .collect();
        let b0 = self.intercept
            - beta
                .iter()
                .zip(&self.feature_means)
                .map(|(b, m)| b * m)
                .sum::<f64>();
        (beta, b0)
    }
}

pub fn predict_elastic_net(model: &ElasticNetModel, features: &[f64]) -> f64 {
    model.intercept
        + model
            .standardize(features)
            .iter()
            .zip(&model.coefficients)
            .map(|(x, b)| x * b)
            .sum::<f64>()
}

/// A fitted model plus the objective value after every sweep.
#[derive(Clone, Debug)]
pub struct ElasticNetFit {
    pub model: ElasticNetModel,
    pub objective_history: Vec<f64>,
    pub sweeps: usize,
}

fn objective(residual: &[f64], beta: &[f64], lambda: f64, alpha: f64) -> f64 {
    let n = residual.len() as f64;
    let rss = residual.iter().map(|r| r * r).sum::<f64>() / (2.0 * n);
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    let l2: f64 = beta.iter().map(|b| b * b).sum();
    rss + lambda * (alpha * l1 + (1.0 - alpha) / 2.0 * l2)
}

/// Cyclic coordinate descent; stops when no coefficient moves by `tol` or
/// more in a sweep. A fit that exhausts `max_iter` sweeps comes back with
/// `converged == false`.
pub fn fit_elastic_net(x: &[Vec<f64>], y: &[f64], params: &ElasticNetParams) -> Result<ElasticNetFit> {
    let p = check_design(x, y)?;
    let ElasticNetParams {
        lambda,
        alpha,
        tol,
        max_iter,
    } = *params;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(RegressError::InvalidParam(format!("lambda {lambda}")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RegressError::InvalidParam(format!("alpha {alpha}")));
    }
    let n = x.len();
    let nf = n as f64;
    let (means, stds) = column_stats(x);
    // column-major standardised design
    let cols: Vec<Vec<f64>> = (0..p)
        .map(|j| x.iter().map(|r| (r[j] - means[j]) / stds[j]).collect())
        .collect();
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut residual: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let z: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf)
        .collect();
    let mut beta = vec![0.0; p];
    let mut history = Vec::new();
    let mut converged = p == 0;
    let mut sweeps = 0;
    while !converged && sweeps < max_iter {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let denom = z[j] + lambda * (1.0 - alpha);
            if z[j] == 0.0 || denom == 0.0 {
                continue;
            }
            let col = &cols[j];
            let rho = col.iter().zip(&residual).map(|(a, r)| a * r).sum::<f64>() / nf + z[j] * beta[j];
            let new = soft_threshold(rho, lambda * alpha) / denom;
            let delta = new - beta[j];
            if delta != 0.0 {
                for (r, a) in residual.iter_mut().zip(col) {
                    *r -= a * delta;
                }
                beta[j] = new;
            }
            max_change = max_change.max(delta.abs());
        }
        history.push(objective(&residual, &beta, lambda, alpha));
        converged = max_change < tol;
    }
    if !converged {
        log::warn!("elastic net did not converge in {max_iter} sweeps");
    }
    Ok(ElasticNetFit {
        model: ElasticNetModel {
            coefficients: beta,
            intercept: y_mean,
            lambda,
            alpha,
            feature_means: means,
            feature_stds: stds,
            converged,
        },
        objective_history: history,
        sweeps,
    })
}

/// Picks (lambda, alpha) from a grid by validation mean squared error. The
/// validation set is every `k`-th sample, `k = round(1 / val_fraction)`.
pub fn select_elastic_net(
    x: &[Vec<f64>],
    y: &[f64],
    lambdas: &[f64],
    alphas: &[f64],
    val_fraction: f64,
) -> Result<ElasticNetParams> {
    check_design(x, y)?;
    let k = (1.0 / val_fraction).round().max(2.0) as usize;
    let (mut xt, mut yt, mut xv, mut yv) = (vec![], vec![], vec![], vec![]);
    for (i, (r, t)) in x.iter().zip(y).enumerate() {
        if i % k == k - 1 {
            xv.push(r.clone());
            yv.push(*t);
        } else {
            xt.push(r.clone());
            yt.push(*t);
        }
    }
    let mut best = ElasticNetParams::default();
    if xv.is_empty() || xt.is_empty() {
        return Ok(best);
    }
    let mut best_err = f64::INFINITY;
    for &lambda in lambdas {
        for &alpha in alphas {
            let params = ElasticNetParams {
                lambda,
                alpha,
                ..ElasticNetParams::default()
            };
            let fit = fit_elastic_net(&xt, &yt, &params)?;
            let err = xv
                .iter()
                .zip(&yv)
                .map(|(r, t)| (predict_elastic_net(&fit.model, r) - t).powi(2))
                .sum::<f64>()
                / xv.len() as f64;
            if err < best_err {
                best_err = err;
                best = params;
            }
        }
    }
    Ok(best)
}

pub fn pinball_loss(pred: f64, y: f64, q: f64) -> f64 {
    q * (y - pred).max(0.0) + (1.0 - q) * (pred - y).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileModel {
    pub quantiles: Vec<f64>,
    /// Per-quantile weights on standardised features.
    pub weights: Vec<Vec<f64>>,
    /// Per-quantile intercepts in standardised target units.
    pub intercepts: Vec<f64>,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_scale: f64,
}

pub const DEFAULT_QUANTILES: [f64; 3] = [0.2, 0.5, 0.8];

/// Subgradient descent on the mean pinball loss, one linear model per
/// quantile, with step size `lr / sqrt(t + 1)`.
pub fn fit_quantile(
    x: &[Vec<f64>],
    y: &[f64],
    quantiles: &[f64],
    lr: f64,
    steps: usize,
) -> Result<QuantileModel> {
    let p = check_design(x, y)?;
    if quantiles.is_empty()
        || quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0))
        || quantiles.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(RegressError::InvalidParam(format!(
            "quantiles {quantiles:?} must be strictly increasing in (0, 1)"
        )));
    }
    let n = x.len() as f64;
    let (means, stds) = column_stats(x);
    let xs: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..p).map(|j| (r[j] - means[j]) / stds[j]).collect())
        .collect();
    let target_mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - target_mean).powi(2)).sum::<f64>() / n).sqrt();
    let target_scale = if sd > 1e-12 { sd } else { 1.0 };
    let ys: Vec<f64> = y.iter().map(|v| (v - target_mean) / target_scale).collect();

    let mut weights = Vec::with_capacity(quantiles.len());
    let mut intercepts = Vec::with_capacity(quantiles.len());
    for &q in quantiles {
        let mut w = vec![0.0; p];
        let mut b = 0.0;
        for t in 0..steps {
            let mut gw = vec![0.0; p];
            let mut gb = 0.0;
            for (row, &target) in xs.iter().zip(&ys) {
                let pred = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let g = if target > pred {
                    -q
                } else if target < pred {
                    1.0 - q
                } else {
                    0.0
                };
                gb += g;
                for (gj, a) in gw.iter_mut().zip(row) {
                    *gj += g * a;
                }
            }
            let step = lr / ((t + 1) as f64).sqrt();
            b -= step * gb / n;
            for (wj, gj) in w.iter_mut().zip(&gw) {
                *wj -= step * gj / n;
            }
        }
        weights.push(w);
        intercepts.push(b);
    }
    Ok(QuantileModel {
        quantiles: quantiles.to_vec(),
        weights,
        intercepts,
        feature_means: means,
        feature_stds: stds,
        target_mean,
        target_scale,
    })
}

/// Per-quantile predictions in target units, sorted so they are monotone in q.
pub fn predict_quantiles(model: &QuantileModel, features: &[f64]) -> Vec<f64> {
    let xs: Vec<f64> = features
        .iter()
        .zip(model.feature_means.iter().zip(&model.feature_stds))
        .map(|(v, (m, s))| (v - m) / s)
        .collect();
    let mut out: Vec<f64> = model
        .weights
        .iter()
        .zip(&model.intercepts)
        .map(|(w, b)| {
            let z = b + xs.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
            model.target_mean + model.target_scale * z
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Spread between the top and bottom quantile predictions, floored at 1 ml.
pub fn sigma_from_quantiles(model: &QuantileModel, features: &[f64]) -> f64 {
    let preds = predict_quantiles(model, features);
    let spread = preds.last().copied().unwrap_or(0.0) - preds.first().copied().unwrap_or(0.0);
    spread.max(1.0)
}
