//! Structural simulator: local linear trend latents, a target and a donor
//! pool loading on them, with a planted effect on the target and a planted
//! spillover on a random subset of donors.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::rng::rng_from_seed;

/// Mean shift of one latent's innovations from `t* + shift_time_offset` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentShift {
    /// 1-based latent number.
    pub latent_index: usize,
    pub shift_mean: f64,
    pub shift_time_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_latents: usize,
    pub n_donors: usize,
    pub t_pre: usize,
    pub t_post: usize,
    pub tau: f64,
    pub tau_spill: f64,
    pub invalid_fraction: f64,
    pub sigma_u: f64,
    pub sigma_delta: f64,
    pub sigma_y: f64,
    pub sigma_x: f64,
    /// Target loadings, length `n_latents`; all ones when absent.
    pub alpha: Option<Vec<f64>>,
    /// Donor loadings, `n_donors` rows of `n_latents`; all ones when absent.
    pub beta: Option<Vec<Vec<f64>>>,
    pub slope_mean: f64,
    pub slope_sd: f64,
    pub latent_shift: Option<LatentShift>,
    /// Fraction of valid donors whose loading on latent 1 is set to zero.
    pub zero_first_loading_fraction: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_latents: 10,
            n_donors: 1000,
            t_pre: 100,
            t_post: 30,
            tau: 2.0,
            tau_spill: -2.0,
            invalid_fraction: 0.8,
            sigma_u: 1.0,
            sigma_delta: 0.1,
            sigma_y: 0.1,
            sigma_x: 0.1,
            alpha: None,
            beta: None,
            slope_mean: 0.1,
            slope_sd: 0.1,
            latent_shift: None,
            zero_first_loading_fraction: 0.0,
            seed: 0,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, format!("{v} must be finite and > 0")))
    }
}

fn finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, "must be finite"))
    }
}

fn fraction(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::validation(field, format!("{v} is outside [0, 1]")))
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_latents == 0 {
            return Err(Error::validation("n_latents", "must be at least 1"));
        }
        if self.n_donors == 0 {
            return Err(Error::validation("n_donors", "must be at least 1"));
        }
        if self.t_pre < 2 {
            return Err(Error::validation("t_pre", "must be at least 2"));
        }
        if self.t_post < 1 {
            return Err(Error::validation("t_post", "must be at least 1"));
        }
        finite("tau", self.tau)?;
        finite("tau_spill", self.tau_spill)?;
        fraction("invalid_fraction", self.invalid_fraction)?;
        positive("sigma_u", self.sigma_u)?;
        positive("sigma_delta", self.sigma_delta)?;
        positive("sigma_y", self.sigma_y)?;
        positive("sigma_x", self.sigma_x)?;
        finite("slope_mean", self.slope_mean)?;
        if !(self.slope_sd >= 0.0 && self.slope_sd.is_finite()) {
            return Err(Error::validation("slope_sd", "must be finite and >= 0"));
        }
        fraction("zero_first_loading_fraction", self.zero_first_loading_fraction)?;
        if let Some(a) = &self.alpha {
            if a.len() != self.n_latents {
                return Err(Error::validation(
                    "alpha",
                    format!("{} loadings for {} latents", a.len(), self.n_latents),
                ));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("alpha", "non-finite loading"));
            }
        }
        if let Some(b) = &self.beta {
            if b.len() != self.n_donors {
                return Err(Error::validation(
                    "beta",
                    format!("{} rows for {} donors", b.len(), self.n_donors),
                ));
            }
            if b.iter().any(|row| row.len() != self.n_latents) {
                return Err(Error::validation(
                    "beta",
                    format!("every row needs {} loadings", self.n_latents),
                ));
            }
            if b.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::validation("beta", "non-finite loading"));
            }
        }
        if let Some(s) = &self.latent_shift {
            if s.latent_index < 1 || s.latent_index > self.n_latents {
                return Err(Error::validation(
                    "latent_shift",
                    format!("latent_index {} is outside 1..={}", s.latent_index, self.n_latents),
                ));
            }
            finite("latent_shift", s.shift_mean)?;
        }
        Ok(())
    }

    pub fn n_times(&self) -> usize {
        self.t_pre + self.t_post
    }

    pub fn n_invalid(&self) -> usize {
        (self.invalid_fraction * self.n_donors as f64).round() as usize
    }
}

/// A simulated panel together with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimTrace {
    pub panel: Panel,
    /// `n_latents` rows over all time points.
    pub latents: Vec<Vec<f64>>,
    pub slopes: Vec<Vec<f64>>,
    pub invalid_mask: Vec<bool>,
    pub true_tau: f64,
    /// Target under no intervention, built from the same noise draws.
    pub true_counterfactual: Vec<f64>,
    /// Donor loadings actually used (after zeroing).
    pub beta: Vec<Vec<f64>>,
}

impl SimTrace {
    pub fn valid_ids(&self) -> Vec<String> {
        self.ids_where(false)
    }

    pub fn invalid_ids(&self) -> Vec<String> {
        self.ids_where(true)
    }

    fn ids_where(&self, invalid: bool) -> Vec<String> {
        self.panel
            .donor_ids()
            .iter()
            .zip(&self.invalid_mask)
            .filter(|(_, &m)| m == invalid)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

pub fn donor_id(i: usize) -> String {
    format!("x{}", i + 1)
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("validated scale")
}

pub fn simulate(config: &SimConfig) -> Result<SimTrace> {
    config.validate()?;
    let mut rng = rng_from_seed(config.seed);
    let m = config.n_latents;
    let n = config.n_donors;
    let t_total = config.n_times();
    let t_star = config.t_pre;

    let slope_dist = Normal::new(config.slope_mean, config.slope_sd).expect("validated slope");
    let s: Vec<f64> = (0..m).map(|_| slope_dist.sample(&mut rng)).collect();
    let rho: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();

    let eps_u = normal(config.sigma_u);
    let eps_d = normal(config.sigma_delta);
    let mut latents = vec![vec![0.0; t_total]; m];
    let mut slopes = vec![vec![0.0; t_total]; m];
    for k in 0..m {
        slopes[k][0] = s[k];
    }
    for t in 0..t_total - 1 {
        for k in 0..m {
            let d = slopes[k][t];
            slopes[k][t + 1] = s[k] + rho[k] * (d - s[k]) + eps_d.sample(&mut rng);
            let mut shift = 0.0;
            if let Some(ls) = &config.latent_shift {
                if ls.latent_index == k + 1 && t + 1 >= t_star + ls.shift_time_offset {
                    shift = ls.shift_mean;
                }
            }
            latents[k][t + 1] = latents[k][t] + d + shift + eps_u.sample(&mut rng);
        }
    }

    let n_invalid = config.n_invalid();
    let mut invalid_mask = vec![false; n];
    for i in sample(&mut rng, n, n_invalid).into_iter() {
        invalid_mask[i] = true;
    }

    let mut beta = config.beta.clone().unwrap_or_else(|| vec![vec![1.0; m]; n]);
    let valid: Vec<usize> = (0..n).filter(|&i| !invalid_mask[i]).collect();
    let n_zero = (config.zero_first_loading_fraction * valid.len() as f64).round() as usize;
    for j in sample(&mut rng, valid.len(), n_zero).into_iter() {
        beta[valid[j]][0] = 0.0;
    }
    let alpha = config.alpha.clone().unwrap_or_else(|| vec![1.0; m]);

    let indicator: Vec<f64> = (0..t_total).map(|t| if t >= t_star { 1.0 } else { 0.0 }).collect();
    let load = |w: &[f64], t: usize| -> f64 { (0..m).map(|k| w[k] * latents[k][t]).sum() };

    let mut true_counterfactual = Vec::with_capacity(t_total);
    let mut target = Vec::with_capacity(t_total);
    for (t, on) in indicator.iter().enumerate() {
        let e: f64 = StandardNormal.sample(&mut rng);
        let cf = load(&alpha, t) + config.sigma_y * e;
        true_counterfactual.push(cf);
        target.push(cf + config.tau * on);
    }

    let mut donors = Vec::with_capacity(n);
    for i in 0..n {
        let spill = if invalid_mask[i] { config.tau_spill } else { 0.0 };
        let series: Vec<f64> = (0..t_total)
            .map(|t| {
                let e: f64 = StandardNormal.sample(&mut rng);
                load(&beta[i], t) + spill * indicator[t] + config.sigma_x * e
            })
            .collect();
        donors.push(series);
    }

    let times = (1..=t_total as i64).collect();
    let ids = (0..n).map(donor_id).collect();
    let panel = Panel::new(times, "y", target, ids, donors, t_star)?;
    Ok(SimTrace {
        panel,
        latents,
        slopes,
        invalid_mask,
        true_tau: config.tau,
        true_counterfactual,
        beta,
    })
}

/// Appends a donor drawn as `N(y^t, sigma)` at every time point.
pub fn inject_synthetic_donor(panel: &Panel, sigma: f64, seed: u64) -> Result<(Panel, String)> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::validation("sigma", format!("{sigma} must be finite and >= 0")));
    }
    let mut rng = rng_from_seed(seed);
    let series: Vec<f64> = panel
        .target()
        .iter()
        .map(|&y| {
            let e: f64 = StandardNormal.sample(&mut rng);
            y + sigma * e
        })
        .collect();
    let mut id = String::from("synthetic");
    let mut k = 1;
    while panel.donor_index(&id).is_some() {
        k += 1;
        id = format!("synthetic_{k}");
    }
    let out = panel.with_donor(id.clone(), series)?;
    Ok((out, id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            n_donors: 50,
            n_latents: 3,
            t_pre: 20,
            t_post: 5,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn default_shape() {
        let trace = simulate(&SimConfig::default()).unwrap();
        assert_eq!(trace.panel.n_times(), 130);
        assert_eq!(trace.panel.n_donors(), 1000);
        assert_eq!(trace.panel.n_pre(), 100);
        assert_eq!(trace.invalid_mask.iter().filter(|&&b| b).count(), 800);
    }

    #[test]
    fn deterministic_for_seed() {
        let a = simulate(&small()).unwrap();
        let b = simulate(&small()).unwrap();
        assert_eq!(a, b);
        let c = simulate(&SimConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.panel, c.panel);
    }

    #[test]
    fn counterfactual_differs_by_planted_effect() {
        let trace = simulate(&small()).unwrap();
        let p = &trace.panel;
        for t in 0..p.n_times() {
            let gap = p.target()[t] - trace.true_counterfactual[t];
            let want = if t >= p.intervention_index() { 2.0 } else { 0.0 };
            assert_eq!(gap, want);
        }
    }

    #[test]
    fn noiseless_limit_is_flat_then_tau() {
        let cfg = SimConfig {
            sigma_u: 1e-300,
            sigma_delta: 1e-300,
            sigma_y: 1e-300,
            sigma_x: 1e-300,
            slope_mean: 0.0,
            slope_sd: 0.0,
            ..small()
        };
        let trace = simulate(&cfg).unwrap();
        let p = &trace.panel;
        let t_star = p.intervention_index();
        for t in 0..p.n_times() {
            let want = if t >= t_star { 2.0 } else { 0.0 };
            assert!((p.target()[t] - want).abs() < 1e-200);
            for i in 0..p.n_donors() {
                let spill = if trace.invalid_mask[i] && t >= t_star { -2.0 } else { 0.0 };
                assert!((p.donor(i)[t] - spill).abs() < 1e-200);
            }
        }
    }

    #[test]
    fn zero_noise_donors_are_linear_in_latents() {
        let cfg = SimConfig {
            sigma_x: 1e-300,
            invalid_fraction: 0.0,
            zero_first_loading_fraction: 0.5,
            ..small()
        };
        let trace = simulate(&cfg).unwrap();
        let zeroed = trace.beta.iter().filter(|b| b[0] == 0.0).count();
        assert_eq!(zeroed, 25);
        for i in 0..cfg.n_donors {
            for t in 0..cfg.n_times() {
                let want: f64 = (0..cfg.n_latents).map(|k| trace.beta[i][k] * trace.latents[k][t]).sum();
                assert!((trace.panel.donor(i)[t] - want).abs() < 1e-9 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn latent_shift_changes_increments_from_offset() {
        let base = SimConfig { n_latents: 2, ..small() };
        let shifted = SimConfig {
            latent_shift: Some(LatentShift {
                latent_index: 1,
                shift_mean: 0.5,
                shift_time_offset: 2,
            }),
            ..base.clone()
        };
        let a = simulate(&base).unwrap();
        let b = simulate(&shifted).unwrap();
        let t_star = base.t_pre;
        for t in 0..base.n_times() {
            let want = 0.5 * (t + 1).saturating_sub(t_star + 2) as f64;
            let got = b.latents[0][t] - a.latents[0][t];
            assert!((got - want).abs() < 1e-9, "t={t}: {got} vs {want}");
            assert_eq!(a.latents[1][t], b.latents[1][t]);
        }
    }

    #[test]
    fn validation_names_field() {
        for (cfg, field) in [
            (SimConfig { t_pre: 1, ..small() }, "t_pre"),
            (SimConfig { sigma_x: 0.0, ..small() }, "sigma_x"),
            (SimConfig { invalid_fraction: 1.5, ..small() }, "invalid_fraction"),
            (SimConfig { alpha: Some(vec![1.0]), ..small() }, "alpha"),
        ] {
            match simulate(&cfg) {
                Err(Error::Validation { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected validation error, got {other:?}"),
            }
        }
    }

    #[test]
    fn config_json_defaults() {
        let cfg: SimConfig = serde_json::from_str(r#"{"sigma_x": 0.5, "seed": 9}"#).unwrap();
        assert_eq!(cfg, SimConfig { sigma_x: 0.5, seed: 9, ..Default::default() });
        assert!(serde_json::from_str::<SimConfig>(r#"{"sigmax": 1}"#).is_err());
    }

    #[test]
    fn injected_donor() {
        let trace = simulate(&small()).unwrap();
        let (p0, id) = inject_synthetic_donor(&trace.panel, 0.0, 1).unwrap();
        let i = p0.donor_index(&id).unwrap();
        assert_eq!(p0.donor(i), p0.target());
        let (a, _) = inject_synthetic_donor(&trace.panel, 0.3, 7).unwrap();
        let (b, _) = inject_synthetic_donor(&trace.panel, 0.3, 7).unwrap();
        assert_eq!(a, b);
        let (c, id2) = inject_synthetic_donor(&p0, 0.3, 7).unwrap();
        assert_ne!(id, id2);
        assert_eq!(c.n_donors(), trace.panel.n_donors() + 2);
    }
}
