//! Linear-Gaussian estimation shared by donor forecasting, synthetic control
//! fitting and proximal debiasing: ridge/OLS with an unpenalised intercept,
//! leave-one-out penalty selection, Gaussian prediction intervals, a sparse
//! mixture-prior MAP fit and a two-stage (instrumented) fit.

pub(crate) mod basis;
mod sparse;
mod two_stage;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use basis::RidgeBasis;

pub use sparse::{fit_sparse_map, fit_sparse_map_traced, SparsePriorConfig};
pub use two_stage::{fit_two_stage, TwoStageFit, TwoStageOptions, WEAK_INSTRUMENT_R2};

/// Log-spaced penalty grid 1e-3 ..= 1e3 in half-decade steps.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=12).map(|k| 10f64.powf(-3.0 + 0.5 * k as f64)).collect()
}

/// What is needed to evaluate `x^T (X^T X + P)^-1 x` for new points after
/// the training design has been dropped.
#[derive(Debug, Clone)]
struct LeverageModel {
    n: usize,
    col_means: DVector<f64>,
    /// Per-column factor mapping raw to penalty-whitened coordinates.
    col_scale: DVector<f64>,
    v: DMatrix<f64>,
    d: DVector<f64>,
    lambda: f64,
}

/// A fitted linear model `y = intercept + coefficients . x + N(0, residual_variance)`.
#[derive(Debug, Clone, Serialize)]
pub struct RegressionFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub residual_variance: f64,
    pub ridge_lambda: f64,
    pub n_train: usize,
    pub design_dim: usize,
    /// Iterative fits only: false when the iteration cap was hit first.
    pub converged: bool,
    #[serde(skip)]
    leverage: Option<Arc<LeverageModel>>,
}

impl RegressionFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    /// Leverage of a new point: `1/n` for the intercept plus the quadratic
    /// form in the regularised Gram matrix.
    pub fn leverage(&self, x: &[f64]) -> f64 {
        let Some(m) = &self.leverage else {
            return 0.0;
        };
        let xc = DVector::from_iterator(
            m.col_means.len(),
            x.iter()
                .zip(m.col_means.iter().zip(m.col_scale.iter()))
                .map(|(v, (mu, s))| (v - mu) / s),
        );
        1.0 / m.n as f64 + quad_form(m, &xc)
    }

    pub(crate) fn with_residual_variance(mut self, v: f64) -> Self {
        self.residual_variance = v;
        self
    }
}

fn quad_form(m: &LeverageModel, xc: &DVector<f64>) -> f64 {
    let proj = m.v.transpose() * xc;
    let inside: f64 = (0..m.d.len())
        .map(|k| proj[k] * proj[k] / (m.d[k] + m.lambda))
        .sum();
    if m.lambda > 0.0 {
        inside + (xc.norm_squared() - proj.norm_squared()).max(0.0) / m.lambda
    } else {
        inside
    }
}

/// Symmetric Gaussian interval at coverage `level`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl PredictionInterval {
    pub fn half_width(&self) -> f64 {
        self.upper - self.center
    }

    /// True when `v` falls outside the closed interval.
    pub fn excludes(&self, v: f64) -> bool {
        v < self.lower || v > self.upper
    }
}

/// Two-sided standard normal quantile z_{(1+level)/2}.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::validation("level", format!("{level} is outside (0, 1)")));
    }
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(std.inverse_cdf((1.0 + level) / 2.0))
}

pub fn predict_interval(
    fit: &RegressionFit,
    x_new: &[f64],
    level: f64,
) -> Result<PredictionInterval> {
    if x_new.len() != fit.design_dim {
        return Err(Error::validation(
            "x_new",
            format!("length {} does not match design dimension {}", x_new.len(), fit.design_dim),
        ));
    }
    let z = normal_quantile(level)?;
    let center = fit.predict(x_new);
    let half = z * (fit.residual_variance * (1.0 + fit.leverage(x_new))).sqrt();
    Ok(PredictionInterval {
        center,
        lower: center - half,
        upper: center + half,
        level,
    })
}

fn check_xy(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::validation(
            "y",
            format!("length {} does not match {} design rows", y.len(), x.nrows()),
        ));
    }
    if y.len() < 2 {
        return Err(Error::validation("y", "at least two observations are required"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("y", "non-finite entry"));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::validation("lambda", format!("{lambda} must be finite and >= 0")));
    }
    Ok(())
}

/// Ridge fit on a prepared basis. `col_scale` maps penalty-whitened
/// coefficients back to raw ones (all ones for plain ridge).
pub(crate) fn fit_from_basis(
    basis: &RidgeBasis,
    y: &[f64],
    lambda: f64,
    raw_means: &DVector<f64>,
    col_scale: &DVector<f64>,
) -> RegressionFit {
    let n = y.len();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let proj = basis.project(&yc);
    let beta = basis.coefficients(&proj, lambda).component_mul(col_scale);
    let intercept = y_mean - raw_means.dot(&beta);
    let f = basis.shrinkage(lambda);
    let fitted = &basis.u * proj.component_mul(&f);
    let rss: f64 = (0..n).map(|i| (yc[i] - fitted[i]).powi(2)).sum();
    let edf = basis.edf(lambda);
    RegressionFit {
        intercept,
        coefficients: beta.iter().copied().collect(),
        residual_variance: rss / (n as f64 - edf).max(1.0),
        ridge_lambda: lambda,
        n_train: n,
        design_dim: basis.p,
        converged: true,
        leverage: Some(Arc::new(LeverageModel {
            n,
            col_means: raw_means.clone(),
            col_scale: col_scale.map(|s| 1.0 / s),
            v: basis.v.clone(),
            d: basis.d.clone(),
            lambda,
        })),
    }
}

/// Minimises `||y - a - X b||^2 + lambda ||b||^2` with the intercept left
/// unpenalised.
pub fn fit_ridge(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<RegressionFit> {
    check_xy(x, y)?;
    check_lambda(lambda)?;
    let basis = RidgeBasis::new(x)?;
    if lambda == 0.0 && basis.rank() < basis.p {
        return Err(Error::Numerical(format!(
            "rank-deficient design: rank {} < {} columns with lambda = 0",
            basis.rank(),
            basis.p
        )));
    }
    let ones = DVector::from_element(basis.p, 1.0);
    let means = basis.col_means.clone();
    Ok(fit_from_basis(&basis, y, lambda, &means, &ones))
}

/// Pooled leave-one-out mean squared error of ridge fits of each column of
/// `yc` (already centred) on the basis, or `None` if some point has unit
/// leverage at this penalty.
pub(crate) fn loo_score(basis: &RidgeBasis, yc: &DMatrix<f64>, proj: &DMatrix<f64>, lambda: f64) -> Option<f64> {
    let h = basis.hat_diag(lambda);
    if h.iter().any(|&v| v >= 1.0 - 1e-10) {
        return None;
    }
    let f = basis.shrinkage(lambda);
    let mut scaled = proj.clone();
    for (k, mut row) in scaled.row_iter_mut().enumerate() {
        row *= f[k];
    }
    let resid = yc - &basis.u * scaled;
    let mut total = 0.0;
    for j in 0..resid.ncols() {
        for i in 0..resid.nrows() {
            let e = resid[(i, j)] / (1.0 - h[i]);
            total += e * e;
        }
    }
    Some(total / (resid.nrows() * resid.ncols()) as f64)
}

/// Picks the grid penalty with the lowest pooled LOO error; ties go to the
/// larger penalty.
pub(crate) fn select_lambda(basis: &RidgeBasis, yc: &DMatrix<f64>, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::validation("lambda_grid", "empty"));
    }
    let proj = basis.u.transpose() * yc;
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        check_lambda(lambda)?;
        if let Some(score) = loo_score(basis, yc, &proj, lambda) {
            if best.is_none_or(|(_, s)| score <= s) {
                best = Some((lambda, score));
            }
        }
    }
    best.map(|(l, _)| l).ok_or_else(|| {
        Error::Numerical("every penalty in the grid interpolates the training data".into())
    })
}

/// Ridge fit with the penalty chosen by closed-form leave-one-out CV.
pub fn fit_ridge_cv(x: &DMatrix<f64>, y: &[f64], grid: &[f64]) -> Result<RegressionFit> {
    check_xy(x, y)?;
    let basis = RidgeBasis::new(x)?;
    let n = y.len();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let yc = DMatrix::from_iterator(n, 1, y.iter().map(|v| v - y_mean));
    let lambda = select_lambda(&basis, &yc, grid)?;
    let ones = DVector::from_element(basis.p, 1.0);
    let means = basis.col_means.clone();
    Ok(fit_from_basis(&basis, y, lambda, &means, &ones))
}
