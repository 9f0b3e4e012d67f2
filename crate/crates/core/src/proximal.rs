//! Proxy-based debiasing of synthetic control weights: the pre-intervention
//! series of donors left out by selection act as instruments for the noisy
//! selected donors.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::{pre_design, ScFit};
use crate::panel::{mean, sample_std, Panel};
use crate::regression::{fit_two_stage, RegressionFit, TwoStageOptions};

/// Instruments whose pre-intervention std relative to their level falls below
/// this are dropped as degenerate.
const MIN_RELATIVE_STD: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct ProximalFit {
    pub sc_fit: RegressionFit,
    pub selected_ids: Vec<String>,
    pub stage1_r2: Vec<f64>,
    /// Instruments actually used.
    pub excluded_ids: Vec<String>,
    /// Instruments dropped as degenerate.
    pub dropped_ids: Vec<String>,
    pub weak_instrument_flag: bool,
}

impl ProximalFit {
    /// The debiased weights as a synthetic control on the selected donors.
    pub fn to_sc_fit(&self) -> ScFit {
        ScFit {
            fit: self.sc_fit.clone(),
            donor_ids: self.selected_ids.clone(),
            sparse: false,
        }
    }
}

pub fn fit_proximal_sc(panel: &Panel, selected_ids: &[String], excluded_ids: &[String]) -> Result<ProximalFit> {
    fit_proximal_sc_with(panel, selected_ids, excluded_ids, TwoStageOptions::default())
}

/// Two-stage fit on pre-intervention rows only: selected donors regressed on
/// the excluded ones, then the target on the fitted selected donors.
pub fn fit_proximal_sc_with(
    panel: &Panel,
    selected_ids: &[String],
    excluded_ids: &[String],
    opts: TwoStageOptions,
) -> Result<ProximalFit> {
    if selected_ids.is_empty() {
        return Err(Error::validation("selected_ids", "at least one donor is required"));
    }
    if panel.n_pre() < 2 {
        return Err(Error::validation(
            "intervention_time",
            "at least two pre-intervention points are required",
        ));
    }
    if let Some(id) = excluded_ids.iter().find(|id| selected_ids.contains(id)) {
        return Err(Error::validation(
            "excluded_ids",
            format!("donor `{id}` is also selected"),
        ));
    }
    let sel = panel.donor_indices(selected_ids)?;
    let exc = panel.donor_indices(excluded_ids)?;
    let pre = panel.n_pre();
    let mut used = Vec::new();
    let mut used_ids = Vec::new();
    let mut dropped_ids = Vec::new();
    for (&i, id) in exc.iter().zip(excluded_ids) {
        let series = &panel.donor(i)[..pre];
        let s = sample_std(series);
        if s.is_finite() && s > MIN_RELATIVE_STD * mean(series).abs().max(1.0) {
            used.push(i);
            used_ids.push(id.clone());
        } else {
            dropped_ids.push(id.clone());
        }
    }
    if used.is_empty() {
        return Err(Error::NoExcludedDonors);
    }
    let x = pre_design(panel, &sel);
    let z: DMatrix<f64> = pre_design(panel, &used);
    let y = &panel.target()[..pre];
    let two = fit_two_stage(y, &x, &z, opts)?;
    Ok(ProximalFit {
        sc_fit: two.fit,
        selected_ids: selected_ids.to_vec(),
        stage1_r2: two.stage1_r2,
        excluded_ids: used_ids,
        dropped_ids,
        weak_instrument_flag: two.weak_instrument,
    })
}
