//! Monte Carlo harness: replicated simulate → select → fit → estimate runs
//! aggregated into bias summaries, plus the semi-synthetic injected-donor
//! study on a real panel.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{estimate_effect, fit_sc, ScFit};
use crate::exec::Execution;
use crate::panel::{sample_std, Panel};
use crate::proximal::fit_proximal_sc;
use crate::regression::SparsePriorConfig;
use crate::rng::derive_seed;
use crate::select::{apply_rule, forecast_donors, sample_ids, select_donors_with, Procedure, SelectionConfig};
use crate::simulate::{inject_synthetic_donor, simulate, LatentShift, SimConfig};

const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcedureKind {
    /// Donors sampled from the whole pool.
    All,
    /// Donors sampled from the truly valid ones.
    Valid,
    S1,
    S2,
}

impl ProcedureKind {
    pub fn label(self) -> &'static str {
        match self {
            ProcedureKind::All => "All",
            ProcedureKind::Valid => "Valid",
            ProcedureKind::S1 => "S1",
            ProcedureKind::S2 => "S2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub replicates: usize,
    pub procedures: Vec<ProcedureKind>,
    pub k_donors: usize,
    /// Forecasting settings; `procedure` is ignored, the list above decides.
    pub selection: SelectionConfig,
    pub debias: bool,
    /// When set, the sparse-prior fit runs on the procedure's whole donor
    /// pool instead of a sample of `k_donors`.
    pub sparse: Option<SparsePriorConfig>,
    pub master_seed: u64,
    /// Upper bound on the number of proxies used when debiasing.
    pub instrument_cap: usize,
    /// Worker count; does not affect results.
    pub jobs: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sim: SimConfig::default(),
            replicates: 200,
            procedures: vec![
                ProcedureKind::All,
                ProcedureKind::Valid,
                ProcedureKind::S1,
                ProcedureKind::S2,
            ],
            k_donors: 10,
            selection: SelectionConfig::default(),
            debias: false,
            sparse: None,
            master_seed: 0,
            instrument_cap: 50,
            jobs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.selection.validate()?;
        if let Some(s) = &self.sparse {
            s.validate()?;
        }
        if self.replicates == 0 {
            return Err(Error::validation("replicates", "must be at least 1"));
        }
        if self.k_donors == 0 {
            return Err(Error::validation("k_donors", "must be at least 1"));
        }
        if self.procedures.is_empty() {
            return Err(Error::validation("procedures", "must not be empty"));
        }
        if self.debias && self.instrument_cap == 0 {
            return Err(Error::validation("instrument_cap", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasSummary {
    pub procedure: ProcedureKind,
    pub mean_bias: f64,
    pub mc_ci95: (f64, f64),
    /// `tau_hat - tau` of every successful replicate, in replicate order.
    pub replicate_biases: Vec<f64>,
    pub failure_count: usize,
    /// Average share of truly invalid donors among the donors fitted.
    pub mean_invalid_share: f64,
}

impl BiasSummary {
    fn from_outcomes(procedure: ProcedureKind, outcomes: &[Option<(f64, f64)>]) -> Self {
        let ok: Vec<(f64, f64)> = outcomes.iter().flatten().copied().collect();
        let biases: Vec<f64> = ok.iter().map(|o| o.0).collect();
        let n = biases.len() as f64;
        let mean = biases.iter().sum::<f64>() / n;
        let half = if biases.len() > 1 {
            Z95 * sample_std(&biases) / n.sqrt()
        } else {
            0.0
        };
        BiasSummary {
            procedure,
            mean_bias: mean,
            mc_ci95: (mean - half, mean + half),
            failure_count: outcomes.len() - ok.len(),
            mean_invalid_share: ok.iter().map(|o| o.1).sum::<f64>() / n,
            replicate_biases: biases,
        }
    }

    pub fn ci_half_width(&self) -> f64 {
        (self.mc_ci95.1 - self.mc_ci95.0) / 2.0
    }

    pub fn contains(&self, v: f64) -> bool {
        self.mc_ci95.0 <= v && v <= self.mc_ci95.1
    }

    pub fn overlaps(&self, other: &BiasSummary) -> bool {
        self.mc_ci95.0 <= other.mc_ci95.1 && other.mc_ci95.0 <= self.mc_ci95.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub replicates: usize,
    pub debias: bool,
    pub sparse: bool,
    pub instrument_cap: usize,
    pub summaries: Vec<BiasSummary>,
}

impl ExperimentReport {
    pub fn summary(&self, procedure: ProcedureKind) -> Option<&BiasSummary> {
        self.summaries.iter().find(|s| s.procedure == procedure)
    }
}

/// One replicate: `(bias, invalid share)` per procedure, `None` on failure.
fn run_replicate(config: &ExperimentConfig, r: usize) -> Vec<Option<(f64, f64)>> {
    let rseed = derive_seed(config.master_seed, r as u64);
    let sim = SimConfig {
        seed: derive_seed(rseed, 0),
        ..config.sim.clone()
    };
    let Ok(trace) = simulate(&sim) else {
        return vec![None; config.procedures.len()];
    };
    let panel = &trace.panel;
    let all_ids = panel.donor_ids().to_vec();
    let valid_ids = trace.valid_ids();
    let needs_forecast = config
        .procedures
        .iter()
        .any(|p| matches!(p, ProcedureKind::S1 | ProcedureKind::S2));
    let forecasts = if needs_forecast {
        forecast_donors(panel, &config.selection, Execution::Sequential).ok()
    } else {
        None
    };

    config
        .procedures
        .iter()
        .enumerate()
        .map(|(pi, &kind)| {
            let pseed = derive_seed(rseed, 1 + pi as u64);
            let outcome = || -> Result<(f64, f64)> {
                let (pool, pvd_excluded) = match kind {
                    ProcedureKind::All => (all_ids.clone(), None),
                    ProcedureKind::Valid => (valid_ids.clone(), None),
                    ProcedureKind::S1 | ProcedureKind::S2 => {
                        let (entries, lambda) = forecasts
                            .clone()
                            .ok_or_else(|| Error::Numerical("donor forecasting failed".into()))?;
                        let rule = if kind == ProcedureKind::S1 { Procedure::S1 } else { Procedure::S2 };
                        let report = apply_rule(entries, lambda, &config.selection, rule)?;
                        (report.pvd_ids, Some(report.excluded_ids))
                    }
                };
                let chosen = if config.sparse.is_some() {
                    if pool.is_empty() {
                        return Err(Error::EmptySelection);
                    }
                    pool.clone()
                } else {
                    sample_ids(&pool, config.k_donors, pseed)?
                };
                let sc: ScFit = if config.debias {
                    let excluded: Vec<String> = match pvd_excluded {
                        Some(e) => e,
                        None => pool.iter().filter(|id| !chosen.contains(id)).cloned().collect(),
                    };
                    if excluded.is_empty() {
                        return Err(Error::NoExcludedDonors);
                    }
                    let proxies = sample_ids(&excluded, config.instrument_cap, derive_seed(pseed, 1))?;
                    fit_proximal_sc(panel, &chosen, &proxies)?.to_sc_fit()
                } else {
                    fit_sc(panel, &chosen, config.sparse.as_ref())?
                };
                let est = estimate_effect(panel, &sc)?;
                let idx = panel.donor_indices(&chosen)?;
                let invalid = idx.iter().filter(|&&i| trace.invalid_mask[i]).count();
                Ok((est.tau_hat - trace.true_tau, invalid as f64 / idx.len() as f64))
            };
            outcome().ok()
        })
        .collect()
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(config, Execution::from_jobs(config.jobs))
}

/// Replicates run under `exec`; the reduction is in replicate order, so the
/// report is identical for any worker count.
pub fn run_experiment_with(config: &ExperimentConfig, exec: Execution) -> Result<ExperimentReport> {
    config.validate()?;
    let per_rep = exec.map_indexed(config.replicates, |r| run_replicate(config, r));
    let summaries = config
        .procedures
        .iter()
        .enumerate()
        .map(|(pi, &kind)| {
            let outcomes: Vec<Option<(f64, f64)>> = per_rep.iter().map(|v| v[pi]).collect();
            BiasSummary::from_outcomes(kind, &outcomes)
        })
        .collect();
    Ok(ExperimentReport {
        replicates: config.replicates,
        debias: config.debias,
        sparse: config.sparse.is_some(),
        instrument_cap: config.instrument_cap,
        summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentShiftResult {
    pub shift_time_offset: usize,
    pub report: ExperimentReport,
}

/// Re-runs the experiment with latent 1's innovations shifted by
/// `shift_mean` from `t* + offset` on, once per offset.
pub fn run_latent_shift_study(
    config: &ExperimentConfig,
    shift_mean: f64,
    offsets: &[usize],
) -> Result<Vec<LatentShiftResult>> {
    offsets
        .iter()
        .map(|&offset| {
            let mut cfg = config.clone();
            cfg.sim.latent_shift = Some(LatentShift {
                latent_index: 1,
                shift_mean,
                shift_time_offset: offset,
            });
            Ok(LatentShiftResult {
                shift_time_offset: offset,
                report: run_experiment(&cfg)?,
            })
        })
        .collect()
}

/// Plot table `procedure,mean_bias,ci_lo,ci_hi`.
pub fn write_summary_csv<W: Write>(summaries: &[BiasSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["procedure", "mean_bias", "ci_lo", "ci_hi"])?;
    for s in summaries {
        w.write_record([
            s.procedure.label().to_string(),
            format!("{:?}", s.mean_bias),
            format!("{:?}", s.mc_ci95.0),
            format!("{:?}", s.mc_ci95.1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemiSyntheticRun {
    pub seed: u64,
    pub injected_id: String,
    /// Observed value outside the forecast interval.
    pub flagged: bool,
    /// Left out of the potentially valid set by the configured rule.
    pub excluded: bool,
    /// 1-based rank of the injected donor's |weight| in the all-donor fit.
    pub naive_weight_rank: usize,
    pub naive_weight: f64,
    pub tau_naive: f64,
    /// `None` when selection returned no donors.
    pub tau_selected: Option<f64>,
    pub n_pvd: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemiSyntheticReport {
    pub sigma: f64,
    pub runs: Vec<SemiSyntheticRun>,
    /// Share of seeds in which the injected donor was excluded.
    pub flag_rate: f64,
    /// Share of seeds with `|tau_naive| < |tau_selected|`.
    pub attenuation_rate: f64,
    pub failure_count: usize,
}

/// Standard deviation of the pre-intervention target, the natural unit for
/// the injected donor's noise.
pub fn pre_target_std(panel: &Panel) -> f64 {
    sample_std(&panel.target()[..panel.n_pre()])
}

fn semi_synthetic_run(panel: &Panel, sigma: f64, selection: &SelectionConfig, seed: u64) -> Result<SemiSyntheticRun> {
    let (p, id) = inject_synthetic_donor(panel, sigma, seed)?;
    let naive = fit_sc(&p, p.donor_ids(), None)?;
    let tau_naive = estimate_effect(&p, &naive)?.tau_hat;
    let ranked = naive.ranked_weights();
    let rank = ranked.iter().position(|(d, _)| *d == id).expect("injected donor is fitted");
    let (flagged, excluded, tau_selected, n_pvd) =
        match select_donors_with(&p, selection, Execution::Sequential) {
            Ok(report) => {
                let entry = report.entries.iter().find(|e| e.id == id).expect("injected donor is forecast");
                let sc = fit_sc(&p, &report.pvd_ids, None)?;
                let tau = estimate_effect(&p, &sc)?.tau_hat;
                (entry.flagged, !report.pvd_ids.contains(&id), Some(tau), report.pvd_ids.len())
            }
            Err(Error::EmptySelection) => (true, true, None, 0),
            Err(e) => return Err(e),
        };
    Ok(SemiSyntheticRun {
        seed,
        injected_id: id,
        flagged,
        excluded,
        naive_weight_rank: rank + 1,
        naive_weight: ranked[rank].1,
        tau_naive,
        tau_selected,
        n_pvd,
    })
}

/// Per seed: inject a `N(y, sigma)` donor, fit on all donors and on the
/// selected ones, and record whether the injected donor was caught.
pub fn run_semi_synthetic(
    panel: &Panel,
    sigma: f64,
    selection: &SelectionConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<SemiSyntheticReport> {
    selection.validate()?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::validation("sigma", format!("{sigma} must be finite and >= 0")));
    }
    if seeds.is_empty() {
        return Err(Error::validation("seeds", "must not be empty"));
    }
    let results = exec.map_indexed(seeds.len(), |k| semi_synthetic_run(panel, sigma, selection, seeds[k]));
    let mut runs = Vec::with_capacity(seeds.len());
    let mut failure_count = 0;
    for r in results {
        match r {
            Ok(run) => runs.push(run),
            Err(e) if e.is_input_error() => return Err(e),
            Err(_) => failure_count += 1,
        }
    }
    let n = seeds.len() as f64;
    let flag_rate = runs.iter().filter(|r| r.excluded).count() as f64 / n;
    let attenuation_rate = runs
        .iter()
        .filter(|r| r.tau_selected.is_some_and(|t| r.tau_naive.abs() < t.abs()))
        .count() as f64
        / n;
    Ok(SemiSyntheticReport {
        sigma,
        runs,
        flag_rate,
        attenuation_rate,
        failure_count,
    })
}
