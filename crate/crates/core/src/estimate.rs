//! Linear synthetic control on a chosen donor set and the resulting effect
//! estimate.

use std::io::Write;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::regression::{fit_ridge, fit_sparse_map, RegressionFit, SparsePriorConfig};

/// Penalty of the plain fit; only there to keep near-collinear donors solvable.
pub const SC_RIDGE_LAMBDA: f64 = 1e-6;

const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Serialize)]
pub struct ScFit {
    pub fit: RegressionFit,
    pub donor_ids: Vec<String>,
    pub sparse: bool,
}

impl ScFit {
    pub fn max_abs_weight(&self) -> f64 {
        self.fit.coefficients.iter().fold(0.0, |m, b| m.max(b.abs()))
    }

    /// `(id, weight)` pairs ordered by decreasing absolute weight.
    pub fn ranked_weights(&self) -> Vec<(String, f64)> {
        let mut w: Vec<(String, f64)> = self
            .donor_ids
            .iter()
            .cloned()
            .zip(self.fit.coefficients.iter().copied())
            .collect();
        w.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
        w
    }
}

/// Pre-intervention design of the named donors (rows = time).
pub(crate) fn pre_design(panel: &Panel, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(panel.n_pre(), idx.len(), |t, j| panel.donor(idx[j])[t])
}

fn check_ids(panel: &Panel, donor_ids: &[String]) -> Result<Vec<usize>> {
    if donor_ids.is_empty() {
        return Err(Error::validation("donor_ids", "at least one donor is required"));
    }
    if panel.n_pre() < 2 {
        return Err(Error::validation(
            "intervention_time",
            "at least two pre-intervention points are required",
        ));
    }
    let idx = panel.donor_indices(donor_ids)?;
    let mut seen = idx.clone();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::validation("donor_ids", "duplicate donor id"));
    }
    Ok(idx)
}

/// Regresses the pre-intervention target on the named donors, either by
/// near-plain least squares or under the sparse mixture prior.
pub fn fit_sc(panel: &Panel, donor_ids: &[String], sparse: Option<&SparsePriorConfig>) -> Result<ScFit> {
    fit_sc_with_lambda(panel, donor_ids, sparse, SC_RIDGE_LAMBDA)
}

/// As [`fit_sc`] with an explicit penalty for the plain variant.
pub fn fit_sc_with_lambda(
    panel: &Panel,
    donor_ids: &[String],
    sparse: Option<&SparsePriorConfig>,
    lambda: f64,
) -> Result<ScFit> {
    let idx = check_ids(panel, donor_ids)?;
    let x = pre_design(panel, &idx);
    let y = &panel.target()[..panel.n_pre()];
    let fit = match sparse {
        Some(prior) => fit_sparse_map(&x, y, prior)?,
        None => fit_ridge(&x, y, lambda)?,
    };
    Ok(ScFit {
        fit,
        donor_ids: donor_ids.to_vec(),
        sparse: sparse.is_some(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub tau_hat: f64,
    /// `y - counterfactual` at each post-intervention point.
    pub per_time_effects: Vec<f64>,
    pub interval_95: (f64, f64),
    /// Synthetic control at every time point (fitted values before the intervention).
    pub counterfactual: Vec<f64>,
    /// Pointwise 95% half-width of the counterfactual at every time point.
    pub pointwise_half_width: Vec<f64>,
}

/// Applies the fit to every time point. The post-period effect interval is
/// `tau_hat +- 1.96 sqrt(s2 / n_post + s2 * mean leverage)`.
pub fn estimate_effect(panel: &Panel, sc: &ScFit) -> Result<EffectEstimate> {
    let idx = panel.donor_indices(&sc.donor_ids)?;
    if idx.len() != sc.fit.design_dim {
        return Err(Error::validation("donor_ids", "do not match the fitted design"));
    }
    let t_star = panel.intervention_index();
    let s2 = sc.fit.residual_variance;
    let mut counterfactual = Vec::with_capacity(panel.n_times());
    let mut pointwise_half_width = Vec::with_capacity(panel.n_times());
    let mut post_leverage = 0.0;
    for t in 0..panel.n_times() {
        let row: Vec<f64> = idx.iter().map(|&i| panel.donor(i)[t]).collect();
        let lev = sc.fit.leverage(&row);
        counterfactual.push(sc.fit.predict(&row));
        pointwise_half_width.push(Z95 * (s2 * (1.0 + lev)).sqrt());
        if t >= t_star {
            post_leverage += lev;
        }
    }
    let n_post = panel.n_post() as f64;
    let per_time_effects: Vec<f64> = (t_star..panel.n_times())
        .map(|t| panel.target()[t] - counterfactual[t])
        .collect();
    let tau_hat = per_time_effects.iter().sum::<f64>() / n_post;
    let half = Z95 * (s2 / n_post + s2 * post_leverage / n_post).sqrt();
    Ok(EffectEstimate {
        tau_hat,
        per_time_effects,
        interval_95: (tau_hat - half, tau_hat + half),
        counterfactual,
        pointwise_half_width,
    })
}

/// Plot table `time,observed,counterfactual,effect,lower,upper`; the bounds
/// are the pointwise 95% band of the effect.
pub fn write_effect_csv<W: Write>(panel: &Panel, est: &EffectEstimate, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "observed", "counterfactual", "effect", "lower", "upper"])?;
    for t in 0..panel.n_times() {
        let y = panel.target()[t];
        let cf = est.counterfactual[t];
        let h = est.pointwise_half_width[t];
        let effect = y - cf;
        w.write_record([
            panel.times()[t].to_string(),
            format!("{y:?}"),
            format!("{cf:?}"),
            format!("{effect:?}"),
            format!("{:?}", effect - h),
            format!("{:?}", effect + h),
        ])?;
    }
    w.flush()?;
    Ok(())
}
