//! MAP estimation under a two-component normal mixture prior on each weight,
//! `b_i ~ eta N(0, sigma_narrow) + (1 - eta) N(0, sigma_wide)`, by EM over
//! the component memberships. Each M-step is a ridge problem with a
//! per-coefficient penalty.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::basis::RidgeBasis;
use super::{check_xy, default_lambda_grid, fit_from_basis, fit_ridge_cv, RegressionFit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparsePriorConfig {
    /// Prior probability of the narrow (near-zero) component.
    pub eta: f64,
    pub sigma_narrow: f64,
    pub sigma_wide: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Observation noise variance; estimated by a cross-validated ridge fit when absent.
    pub noise_variance: Option<f64>,
}

impl Default for SparsePriorConfig {
    fn default() -> Self {
        SparsePriorConfig {
            eta: 0.9,
            sigma_narrow: 0.01,
            sigma_wide: 1.0,
            max_iters: 200,
            tol: 1e-8,
            noise_variance: None,
        }
    }
}

impl SparsePriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::validation("eta", "must lie in (0, 1)"));
        }
        if !(self.sigma_narrow > 0.0 && self.sigma_wide > 0.0) {
            return Err(Error::validation("sigma_narrow", "prior scales must be positive"));
        }
        if self.sigma_narrow >= self.sigma_wide {
            return Err(Error::validation("sigma_narrow", "must be smaller than sigma_wide"));
        }
        if self.max_iters == 0 {
            return Err(Error::validation("max_iters", "must be at least 1"));
        }
        if let Some(v) = self.noise_variance {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation("noise_variance", "must be positive"));
            }
        }
        Ok(())
    }

    fn log_prior(&self, b: f64) -> f64 {
        let narrow = self.eta.ln() + log_normal_pdf(b, self.sigma_narrow);
        let wide = (1.0 - self.eta).ln() + log_normal_pdf(b, self.sigma_wide);
        log_add(narrow, wide)
    }

    /// Posterior probability that `b` belongs to the narrow component.
    fn responsibility(&self, b: f64) -> f64 {
        let narrow = self.eta.ln() + log_normal_pdf(b, self.sigma_narrow);
        let wide = (1.0 - self.eta).ln() + log_normal_pdf(b, self.sigma_wide);
        (narrow - log_add(narrow, wide)).exp()
    }
}

fn log_normal_pdf(x: f64, sd: f64) -> f64 {
    -0.5 * (x / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn fit_sparse_map(
    x: &DMatrix<f64>,
    y: &[f64],
    prior: &SparsePriorConfig,
) -> Result<RegressionFit> {
    fit_sparse_map_traced(x, y, prior).map(|(fit, _)| fit)
}

/// As [`fit_sparse_map`], also returning the log posterior (up to a
/// constant) after the initial fit and after every EM iteration.
pub fn fit_sparse_map_traced(
    x: &DMatrix<f64>,
    y: &[f64],
    prior: &SparsePriorConfig,
) -> Result<(RegressionFit, Vec<f64>)> {
    check_xy(x, y)?;
    prior.validate()?;
    let (n, p) = x.shape();
    let noise = match prior.noise_variance {
        Some(v) => v,
        None => fit_ridge_cv(x, y, &default_lambda_grid())?
            .residual_variance
            .max(1e-12),
    };

    let raw_means = DVector::from_iterator(p, x.column_iter().map(|c| c.mean()));
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-raw_means[j]);
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));

    // penalty_i = noise * (r_i / s1^2 + (1 - r_i) / s2^2); all-wide start
    let solve = |resp: &[f64]| -> RegressionFit {
        let scale = DVector::from_iterator(
            p,
            resp.iter().map(|&r| {
                let w = noise * (r / prior.sigma_narrow.powi(2) + (1.0 - r) / prior.sigma_wide.powi(2));
                1.0 / w.sqrt()
            }),
        );
        let mut xs = xc.clone();
        for (j, mut col) in xs.column_iter_mut().enumerate() {
            col *= scale[j];
        }
        let basis = RidgeBasis::from_centered(xs, DVector::zeros(p));
        fit_from_basis(&basis, y, 1.0, &raw_means, &scale)
    };
    let log_post = |fit: &RegressionFit| -> f64 {
        let b = DVector::from_column_slice(&fit.coefficients);
        let resid = &yc - &xc * &b;
        -resid.norm_squared() / (2.0 * noise)
            + fit.coefficients.iter().map(|&v| prior.log_prior(v)).sum::<f64>()
    };

    let mut fit = solve(&vec![0.0; p]);
    let mut trace = vec![log_post(&fit)];
    let mut converged = false;
    for _ in 0..prior.max_iters {
        let resp: Vec<f64> = fit.coefficients.iter().map(|&b| prior.responsibility(b)).collect();
        let next = solve(&resp);
        let change = next
            .coefficients
            .iter()
            .zip(&fit.coefficients)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        fit = next;
        trace.push(log_post(&fit));
        if change < prior.tol {
            converged = true;
            break;
        }
    }
    fit.converged = converged;
    Ok((fit, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::fit_ridge;
    use crate::rng::rng_from_seed;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn two_of_twenty(seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let n = 60;
        let x = DMatrix::from_fn(n, 20, |_, _| StandardNormal.sample(&mut rng));
        let noise = Normal::new(0.0, 0.01).unwrap();
        let y = (0..n)
            .map(|i| x[(i, 3)] + x[(i, 11)] + noise.sample(&mut rng))
            .collect();
        (x, y)
    }

    #[test]
    fn recovers_two_active_weights() {
        let (x, y) = two_of_twenty(4);
        let prior = SparsePriorConfig {
            eta: 0.9,
            sigma_narrow: 0.01,
            sigma_wide: 1.0,
            ..Default::default()
        };
        let fit = fit_sparse_map(&x, &y, &prior).unwrap();
        for (j, b) in fit.coefficients.iter().enumerate() {
            if j == 3 || j == 11 {
                assert!(*b >= 0.8, "active {j}: {b}");
            } else {
                assert!(b.abs() <= 0.05, "inactive {j}: {b}");
            }
        }
        assert!(fit.converged);
    }

    #[test]
    fn vanishing_eta_reduces_to_ridge() {
        let (x, y) = two_of_twenty(9);
        let noise = 0.5;
        let prior = SparsePriorConfig {
            eta: 1e-12,
            sigma_narrow: 0.1,
            sigma_wide: 1.0,
            noise_variance: Some(noise),
            ..Default::default()
        };
        let sparse = fit_sparse_map(&x, &y, &prior).unwrap();
        // single wide Gaussian prior == ridge with penalty noise / sigma_wide^2
        let ridge = fit_ridge(&x, &y, noise / 1.0).unwrap();
        for (a, b) in sparse.coefficients.iter().zip(&ridge.coefficients) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!((sparse.intercept - ridge.intercept).abs() < 1e-6);
    }

    #[test]
    fn null_signal_gives_zero_weights() {
        let (x, _) = two_of_twenty(1);
        let y = vec![0.0; x.nrows()];
        let prior = SparsePriorConfig {
            noise_variance: Some(1.0),
            ..Default::default()
        };
        let fit = fit_sparse_map(&x, &y, &prior).unwrap();
        assert!(fit.intercept.abs() < 1e-12);
        assert!(fit.coefficients.iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn log_posterior_never_decreases() {
        for seed in 0..5 {
            let (x, y) = two_of_twenty(seed);
            let prior = SparsePriorConfig {
                eta: 0.8,
                sigma_narrow: 0.05,
                sigma_wide: 2.0,
                ..Default::default()
            };
            let (_, trace) = fit_sparse_map_traced(&x, &y, &prior).unwrap();
            assert!(trace.len() >= 2);
            for w in trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn iteration_cap_sets_flag() {
        let (x, y) = two_of_twenty(2);
        let prior = SparsePriorConfig {
            eta: 0.9,
            sigma_narrow: 0.01,
            max_iters: 1,
            tol: 0.0,
            ..Default::default()
        };
        let fit = fit_sparse_map(&x, &y, &prior).unwrap();
        assert!(!fit.converged);
    }

    #[test]
    fn rejects_bad_prior() {
        let (x, y) = two_of_twenty(0);
        for prior in [
            SparsePriorConfig { eta: 1.0, ..Default::default() },
            SparsePriorConfig { sigma_narrow: 2.0, sigma_wide: 1.0, ..Default::default() },
        ] {
            assert!(fit_sparse_map(&x, &y, &prior).is_err());
        }
    }
}
