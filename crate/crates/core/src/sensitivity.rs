//! Bias bounds for selection errors. Each bound has the form
//! `N * max|beta| * shift`, where `N` is the number of selected donors and
//! the shift is a pre/post mean difference or a hypothesised spillover.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::ScFit;
use crate::panel::{mean, Panel};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FnCurve {
    pub tau_spill_grid: Vec<f64>,
    pub bounds: Vec<f64>,
    /// Smallest spillover magnitude whose bound reaches `|tau_hat|`;
    /// infinite when every weight is zero.
    pub sign_flip_tau_spill: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub tau_hat: f64,
    pub ov_bound: f64,
    pub fp_bound: f64,
    pub n_used: usize,
    pub max_abs_weight: f64,
    pub max_selected_shift: f64,
    pub max_excluded_shift: f64,
    pub tau_spill_grid: Vec<f64>,
    pub fn_bounds: Vec<f64>,
    pub sign_flip_tau_spill: f64,
}

/// `|mean(pre) - mean(post)|` of one series.
pub fn mean_shift(panel: &Panel, series: &[f64]) -> f64 {
    let t = panel.intervention_index();
    (mean(&series[..t]) - mean(&series[t..])).abs()
}

fn max_shift(panel: &Panel, ids: &[String]) -> Result<f64> {
    let idx = panel.donor_indices(ids)?;
    Ok(idx
        .iter()
        .map(|&i| mean_shift(panel, panel.donor(i)))
        .fold(0.0, f64::max))
}

fn scale(sc: &ScFit) -> f64 {
    sc.donor_ids.len() as f64 * sc.max_abs_weight()
}

/// Bound on bias from latents not captured by the selected donors.
pub fn ov_bias_bound(panel: &Panel, sc: &ScFit) -> Result<f64> {
    Ok(scale(sc) * max_shift(panel, &sc.donor_ids)?)
}

/// Bound on bias from valid donors wrongly excluded; zero when none were.
pub fn fp_bias_bound(panel: &Panel, sc: &ScFit, excluded_ids: &[String]) -> Result<f64> {
    Ok(scale(sc) * max_shift(panel, excluded_ids)?)
}

/// Bound on bias from undetected spillover of each size in `grid`.
pub fn fn_bias_curve(sc: &ScFit, grid: &[f64], tau_hat: f64) -> Result<FnCurve> {
    if grid.is_empty() {
        return Err(Error::validation("tau_spill_grid", "must not be empty"));
    }
    if let Some(v) = grid.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::validation("tau_spill_grid", format!("{v} must be finite and >= 0")));
    }
    let s = scale(sc);
    let sign_flip_tau_spill = if s > 0.0 { tau_hat.abs() / s } else { f64::INFINITY };
    Ok(FnCurve {
        tau_spill_grid: grid.to_vec(),
        bounds: grid.iter().map(|t| s * t).collect(),
        sign_flip_tau_spill,
    })
}

/// `0, 0.25, ..., 5`.
pub fn default_tau_spill_grid() -> Vec<f64> {
    (0..=20).map(|k| 0.25 * k as f64).collect()
}

pub fn sensitivity_report(
    panel: &Panel,
    sc: &ScFit,
    excluded_ids: &[String],
    tau_hat: f64,
    grid: &[f64],
) -> Result<SensitivityReport> {
    let curve = fn_bias_curve(sc, grid, tau_hat)?;
    let max_selected_shift = max_shift(panel, &sc.donor_ids)?;
    let max_excluded_shift = max_shift(panel, excluded_ids)?;
    let s = scale(sc);
    Ok(SensitivityReport {
        tau_hat,
        ov_bound: s * max_selected_shift,
        fp_bound: s * max_excluded_shift,
        n_used: sc.donor_ids.len(),
        max_abs_weight: sc.max_abs_weight(),
        max_selected_shift,
        max_excluded_shift,
        tau_spill_grid: curve.tau_spill_grid,
        fn_bounds: curve.bounds,
        sign_flip_tau_spill: curve.sign_flip_tau_spill,
    })
}

/// Plot table `tau_spill,bound`.
pub fn write_fn_curve_csv<W: Write>(report: &SensitivityReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tau_spill", "bound"])?;
    for (t, b) in report.tau_spill_grid.iter().zip(&report.fn_bounds) {
        w.write_record([format!("{t:?}"), format!("{b:?}")])?;
    }
    w.flush()?;
    Ok(())
}
