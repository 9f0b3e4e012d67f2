use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::basis::RidgeBasis;
use super::{check_lambda, check_xy, fit_ridge, RegressionFit};
use crate::error::{Error, Result};

/// Stage-1 in-sample R² below which an instrument set is reported as weak.
pub const WEAK_INSTRUMENT_R2: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStageOptions {
    pub stage1_lambda: f64,
    pub stage2_lambda: f64,
}

impl Default for TwoStageOptions {
    fn default() -> Self {
        TwoStageOptions {
            stage1_lambda: 1e-6,
            stage2_lambda: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TwoStageFit {
    pub fit: RegressionFit,
    /// In-sample R² of each column of X regressed on Z.
    pub stage1_r2: Vec<f64>,
    pub weak_instrument: bool,
}

/// Regresses each column of `x` on `z` (with intercept), then `y` on the
/// stage-1 fitted values. The returned residual variance uses structural
/// residuals `y - a - X b`, not the stage-2 ones.
pub fn fit_two_stage(
    y: &[f64],
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    opts: TwoStageOptions,
) -> Result<TwoStageFit> {
    check_xy(x, y)?;
    if z.nrows() != x.nrows() {
        return Err(Error::validation(
            "z",
            format!("{} rows but X has {}", z.nrows(), x.nrows()),
        ));
    }
    if z.ncols() == 0 {
        return Err(Error::validation("z", "at least one instrument is required"));
    }
    check_lambda(opts.stage1_lambda)?;
    let n = x.nrows();
    let basis = RidgeBasis::new(z)?;
    if basis.rank() == 0 {
        return Err(Error::Numerical("every instrument is constant".into()));
    }
    if opts.stage1_lambda == 0.0 && basis.rank() < basis.p {
        return Err(Error::Numerical(format!(
            "rank-deficient instruments: rank {} < {}",
            basis.rank(),
            basis.p
        )));
    }
    let f = basis.shrinkage(opts.stage1_lambda);
    let mut x_hat = DMatrix::zeros(n, x.ncols());
    let mut stage1_r2 = Vec::with_capacity(x.ncols());
    for (j, col) in x.column_iter().enumerate() {
        let m = col.mean();
        let xc = DVector::from_iterator(n, col.iter().map(|v| v - m));
        let fitted = &basis.u * basis.project(&xc).component_mul(&f);
        let tss = xc.norm_squared();
        let rss = (&xc - &fitted).norm_squared();
        let r2 = if tss > 0.0 { (1.0 - rss / tss).clamp(0.0, 1.0) } else { 0.0 };
        stage1_r2.push(r2);
        for i in 0..n {
            x_hat[(i, j)] = m + fitted[i];
        }
    }
    let fit = fit_ridge(&x_hat, y, opts.stage2_lambda)?;
    let beta = DVector::from_column_slice(&fit.coefficients);
    let structural = DVector::from_column_slice(y) - (x * beta).add_scalar(fit.intercept);
    let dof = (n as f64 - 1.0 - x.ncols() as f64).max(1.0);
    let fit = fit.with_residual_variance(structural.norm_squared() / dof);
    let weak_instrument = stage1_r2.iter().any(|&r| r < WEAK_INSTRUMENT_R2);
    Ok(TwoStageFit {
        fit,
        stage1_r2,
        weak_instrument,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand_distr::{Distribution, Normal, StandardNormal};

    const EXACT: TwoStageOptions = TwoStageOptions {
        stage1_lambda: 0.0,
        stage2_lambda: 0.0,
    };

    fn design(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn instruments_equal_regressors_reduce_to_ols() {
        let x = design(40, 3, 1);
        let y: Vec<f64> = (0..40).map(|i| 1.0 + x[(i, 0)] - 2.0 * x[(i, 2)] + 0.1 * (i as f64).sin()).collect();
        let two = fit_two_stage(&y, &x, &x, EXACT).unwrap();
        let ols = fit_ridge(&x, &y, 0.0).unwrap();
        assert!((two.fit.intercept - ols.intercept).abs() < 1e-10);
        for (a, b) in two.fit.coefficients.iter().zip(&ols.coefficients) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(two.stage1_r2.iter().all(|&r| (r - 1.0).abs() < 1e-12));
        assert!(!two.weak_instrument);
    }

    #[test]
    fn exact_linear_instruments_reproduce_ols() {
        let z = design(50, 4, 2);
        let gamma = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.0, 0.2, -1.0]);
        let x = &z * gamma;
        let y: Vec<f64> = (0..50).map(|i| 0.5 * x[(i, 0)] + x[(i, 1)] + (i as f64 * 0.7).cos()).collect();
        let two = fit_two_stage(&y, &x, &z, EXACT).unwrap();
        let ols = fit_ridge(&x, &y, 0.0).unwrap();
        for (a, b) in two.fit.coefficients.iter().zip(&ols.coefficients) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn corrects_errors_in_variables_attenuation() {
        let mut rng = rng_from_seed(99);
        let n = 10_000;
        let e = Normal::new(0.0, 0.5).unwrap();
        let mut x = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = StandardNormal.sample(&mut rng);
            x.push(u + e.sample(&mut rng));
            z.push(u + e.sample(&mut rng));
            y.push(u);
        }
        let xm = DMatrix::from_column_slice(n, 1, &x);
        let zm = DMatrix::from_column_slice(n, 1, &z);
        let naive = fit_ridge(&xm, &y, 0.0).unwrap().coefficients[0];
        let iv = fit_two_stage(&y, &xm, &zm, EXACT).unwrap().fit.coefficients[0];
        // attenuation factor 1 / (1 + 0.25)
        assert!((naive - 0.8).abs() < 0.03, "naive {naive}");
        assert!((iv - 1.0).abs() < 0.05, "iv {iv}");
    }

    #[test]
    fn independent_instrument_is_flagged_weak() {
        let x = design(500, 1, 5);
        let z = design(500, 1, 6);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let two = fit_two_stage(&y, &x, &z, TwoStageOptions::default()).unwrap();
        assert!(two.stage1_r2[0] < WEAK_INSTRUMENT_R2);
        assert!(two.weak_instrument);
    }

    #[test]
    fn constant_instruments_are_rejected() {
        let x = design(10, 1, 5);
        let z = DMatrix::from_element(10, 2, 3.0);
        let y: Vec<f64> = x.iter().copied().collect();
        assert!(fit_two_stage(&y, &x, &z, TwoStageOptions::default()).is_err());
        let x1 = design(1, 1, 5);
        assert!(fit_two_stage(&[1.0], &x1, &x1, TwoStageOptions::default()).is_err());
    }
}
