//! One-step-ahead donor forecasting and the S1/S2 selection rules.
//!
//! Every donor is regressed on the whole lagged (normalised) donor pool over
//! the pre-intervention period and forecast at the intervention. S1 keeps
//! the donors with the smallest forecast errors; S2 keeps the donors whose
//! observed value falls inside the forecast interval.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::panel::{normalize, time_average, Panel};
use crate::regression::basis::RidgeBasis;
use crate::regression::{default_lambda_grid, normal_quantile, select_lambda, PredictionInterval};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Procedure {
    /// Smallest absolute forecast error.
    S1,
    /// Inside the forecast interval.
    S2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub procedure: Procedure,
    pub ppi_level: f64,
    pub s1_count: usize,
    pub time_average_bucket: Option<usize>,
    /// Fixed forecast penalty; chosen by pooled leave-one-out CV when absent.
    pub ridge_lambda: Option<f64>,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            procedure: Procedure::S2,
            ppi_level: 0.8,
            s1_count: 10,
            time_average_bucket: None,
            ridge_lambda: None,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ppi_level > 0.0 && self.ppi_level < 1.0) {
            return Err(Error::validation("ppi_level", format!("{} is outside (0, 1)", self.ppi_level)));
        }
        if self.s1_count == 0 {
            return Err(Error::validation("s1_count", "must be at least 1"));
        }
        if self.time_average_bucket == Some(0) {
            return Err(Error::validation("time_average_bucket", "must be at least 1"));
        }
        if let Some(l) = self.ridge_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::validation("ridge_lambda", "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorForecast {
    pub id: String,
    pub predicted: f64,
    pub actual: f64,
    pub abs_error: f64,
    pub lower: f64,
    pub upper: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub procedure: Procedure,
    pub ppi_level: f64,
    pub ridge_lambda: f64,
    pub time_average_bucket: Option<usize>,
    pub entries: Vec<DonorForecast>,
    pub pvd_ids: Vec<String>,
    pub excluded_ids: Vec<String>,
}

impl SelectionReport {
    pub fn flagged_ids(&self) -> Vec<String> {
        self.entries.iter().filter(|e| e.flagged).map(|e| e.id.clone()).collect()
    }
}

/// The lagged design shared by every donor's forecast regression.
struct ForecastDesign {
    basis: RidgeBasis,
    /// Centred test row `x^{t*-1}` mapped into the coefficient basis.
    test_weights: DVector<f64>,
    leverage: f64,
    lambda: f64,
    z: f64,
    level: f64,
}

impl ForecastDesign {
    /// `panel` must be normalised; rows after the intervention are ignored.
    fn new(panel: &Panel, lambda: Option<f64>, level: f64) -> Result<Self> {
        let t_star = panel.intervention_index();
        if t_star < 3 {
            return Err(Error::validation(
                "intervention_time",
                "forecasting needs at least 3 pre-intervention points",
            ));
        }
        let n = t_star - 1;
        let p = panel.n_donors();
        let x = DMatrix::from_fn(n, p, |r, j| panel.donor(j)[r]);
        let y = DMatrix::from_fn(n, p, |r, j| panel.donor(j)[r + 1]);
        let basis = RidgeBasis::new(&x)?;
        let mut yc = y;
        for mut col in yc.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        let lambda = match lambda {
            Some(l) => l,
            None => select_lambda(&basis, &yc, &default_lambda_grid())?,
        };
        if lambda == 0.0 && basis.rank() < p {
            return Err(Error::Numerical(format!(
                "lagged donor design has rank {} < {} donors; a positive ridge penalty is required",
                basis.rank(),
                p
            )));
        }
        let xc = DVector::from_fn(p, |j, _| panel.donor(j)[t_star - 1] - basis.col_means[j]);
        let proj = basis.v.transpose() * &xc;
        let r = basis.rank();
        let mut quad: f64 = (0..r).map(|k| proj[k] * proj[k] / (basis.d[k] + lambda)).sum();
        if lambda > 0.0 {
            quad += (xc.norm_squared() - proj.norm_squared()).max(0.0) / lambda;
        }
        let leverage = 1.0 / n as f64 + quad;
        // prediction = mean + sum_k proj_k sqrt(d_k)/(d_k+lambda) (U^T yc)_k
        let test_weights =
            DVector::from_fn(r, |k, _| proj[k] * basis.d[k].sqrt() / (basis.d[k] + lambda));
        let z = normal_quantile(level)?;
        Ok(ForecastDesign {
            basis,
            test_weights,
            leverage,
            lambda,
            z,
            level,
        })
    }

    fn forecast(&self, panel: &Panel, j: usize) -> (f64, PredictionInterval, f64) {
        let t_star = panel.intervention_index();
        let series = panel.donor(j);
        let labels = &series[1..t_star];
        let n = labels.len();
        let mean = labels.iter().sum::<f64>() / n as f64;
        let yc = DVector::from_iterator(n, labels.iter().map(|v| v - mean));
        let proj = self.basis.project(&yc);
        let predicted = mean + self.test_weights.dot(&proj);
        let f = self.basis.shrinkage(self.lambda);
        let fitted = &self.basis.u * proj.component_mul(&f);
        let rss = (&yc - fitted).norm_squared();
        let dof = (n as f64 - self.basis.edf(self.lambda)).max(1.0);
        let half = self.z * (rss / dof * (1.0 + self.leverage)).sqrt();
        let interval = PredictionInterval {
            center: predicted,
            lower: predicted - half,
            upper: predicted + half,
            level: self.level,
        };
        (predicted, interval, series[t_star])
    }
}

/// Averages (if configured), normalises and cuts the panel just after the
/// intervention so nothing later can reach the forecasts.
fn prepare(panel: &Panel, bucket: Option<usize>) -> Result<Panel> {
    let base = match bucket {
        Some(b) => time_average(panel, b)?,
        None => panel.clone(),
    };
    let cut = base.truncate_after(base.intervention_index())?;
    Ok(normalize(&cut)?.0)
}

/// Forecast of one donor at the intervention from a normalised panel.
pub fn forecast_donor(
    panel: &Panel,
    donor_index: usize,
    config: &SelectionConfig,
) -> Result<(f64, PredictionInterval, f64)> {
    config.validate()?;
    if donor_index >= panel.n_donors() {
        return Err(Error::validation(
            "donor_index",
            format!("{donor_index} is out of range for {} donors", panel.n_donors()),
        ));
    }
    let cut = panel.truncate_after(panel.intervention_index())?;
    let design = ForecastDesign::new(&cut, config.ridge_lambda, config.ppi_level)?;
    Ok(design.forecast(&cut, donor_index))
}

/// Forecasts every donor of a raw panel (averaging and normalising first
/// per `config`); returns the entries and the penalty used.
pub fn forecast_donors(
    panel: &Panel,
    config: &SelectionConfig,
    exec: Execution,
) -> Result<(Vec<DonorForecast>, f64)> {
    config.validate()?;
    let prepared = prepare(panel, config.time_average_bucket)?;
    let design = ForecastDesign::new(&prepared, config.ridge_lambda, config.ppi_level)?;
    let entries = exec.map_indexed(prepared.n_donors(), |j| {
        let (predicted, interval, actual) = design.forecast(&prepared, j);
        DonorForecast {
            id: prepared.donor_ids()[j].clone(),
            predicted,
            actual,
            abs_error: (actual - predicted).abs(),
            lower: interval.lower,
            upper: interval.upper,
            flagged: interval.excludes(actual),
        }
    });
    Ok((entries, design.lambda))
}

pub fn select_donors(panel: &Panel, config: &SelectionConfig) -> Result<SelectionReport> {
    select_donors_with(panel, config, Execution::Auto)
}

pub fn select_donors_with(
    panel: &Panel,
    config: &SelectionConfig,
    exec: Execution,
) -> Result<SelectionReport> {
    let (entries, lambda) = forecast_donors(panel, config, exec)?;
    apply_rule(entries, lambda, config, config.procedure)
}

/// Turns forecasts into a report under `procedure`.
pub fn apply_rule(
    entries: Vec<DonorForecast>,
    lambda: f64,
    config: &SelectionConfig,
    procedure: Procedure,
) -> Result<SelectionReport> {
    let keep: Vec<bool> = match procedure {
        Procedure::S1 => {
            let mut order: Vec<usize> = (0..entries.len()).collect();
            order.sort_by(|&a, &b| entries[a].abs_error.total_cmp(&entries[b].abs_error).then(a.cmp(&b)));
            let mut keep = vec![false; entries.len()];
            for &j in order.iter().take(config.s1_count) {
                keep[j] = true;
            }
            keep
        }
        Procedure::S2 => entries.iter().map(|e| !e.flagged).collect(),
    };
    if !keep.iter().any(|&k| k) {
        return Err(Error::EmptySelection);
    }
    let pick = |want: bool| -> Vec<String> {
        entries
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k == want)
            .map(|(e, _)| e.id.clone())
            .collect()
    };
    Ok(SelectionReport {
        procedure,
        ppi_level: config.ppi_level,
        ridge_lambda: lambda,
        time_average_bucket: config.time_average_bucket,
        pvd_ids: pick(true),
        excluded_ids: pick(false),
        entries,
    })
}

/// Table `id,predicted,actual,abs_error,lower,upper,flagged,pvd`.
pub fn write_selection_csv<W: Write>(report: &SelectionReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "predicted", "actual", "abs_error", "lower", "upper", "flagged", "pvd"])?;
    for e in &report.entries {
        w.write_record([
            e.id.clone(),
            format!("{:?}", e.predicted),
            format!("{:?}", e.actual),
            format!("{:?}", e.abs_error),
            format!("{:?}", e.lower),
            format!("{:?}", e.upper),
            e.flagged.to_string(),
            report.pvd_ids.contains(&e.id).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Uniform sample of `min(k, |pvd|)` potentially valid donors, in report order.
pub fn sample_pvds(report: &SelectionReport, k: usize, seed: u64) -> Result<Vec<String>> {
    sample_ids(&report.pvd_ids, k, seed)
}

/// Uniform sample of `min(k, |ids|)` ids, in input order.
pub fn sample_ids(ids: &[String], k: usize, seed: u64) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::validation("k", "must be at least 1"));
    }
    if ids.is_empty() {
        return Err(Error::EmptySelection);
    }
    if ids.len() <= k {
        return Ok(ids.to_vec());
    }
    let mut rng = rng_from_seed(seed);
    let mut idx = sample(&mut rng, ids.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| ids[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_panel() -> Panel {
        // d2 copies d1 one step later; d3 is an unrelated wave
        let t = 30;
        let d1: Vec<f64> = (0..t).map(|i| ((i * i) as f64 * 0.13).sin() + 0.05 * i as f64).collect();
        let mut d2 = vec![0.3];
        d2.extend_from_slice(&d1[..t - 1]);
        let d3: Vec<f64> = (0..t).map(|i| (i as f64 * 0.7).cos()).collect();
        Panel::new(
            (0..t as i64).collect(),
            "y",
            vec![0.0; t],
            vec!["d1".into(), "d2".into(), "d3".into()],
            vec![d1, d2, d3],
            20,
        )
        .unwrap()
    }

    #[test]
    fn lag_copy_is_forecast_exactly() {
        let p = toy_panel();
        let (norm, _) = normalize(&p).unwrap();
        let cfg = SelectionConfig { ridge_lambda: Some(1e-10), ..Default::default() };
        let (pred, _, actual) = forecast_donor(&norm, 1, &cfg).unwrap();
        assert!((pred - actual).abs() < 1e-6, "{pred} vs {actual}");
    }

    #[test]
    fn s1_returns_requested_count() {
        let p = toy_panel();
        for k in 1..5 {
            let cfg = SelectionConfig { procedure: Procedure::S1, s1_count: k, ..Default::default() };
            let rep = select_donors(&p, &cfg).unwrap();
            assert_eq!(rep.pvd_ids.len(), k.min(3));
            assert_eq!(rep.pvd_ids.len() + rep.excluded_ids.len(), 3);
        }
    }

    #[test]
    fn report_entries_are_consistent() {
        let rep = select_donors(&toy_panel(), &SelectionConfig::default()).unwrap();
        for e in &rep.entries {
            assert_eq!(e.abs_error, (e.actual - e.predicted).abs());
            assert_eq!(e.flagged, e.actual < e.lower || e.actual > e.upper);
            assert_eq!(rep.pvd_ids.contains(&e.id), !e.flagged);
        }
    }

    #[test]
    fn too_few_pre_points() {
        let p = Panel::new(
            vec![1, 2, 3],
            "y",
            vec![0.0; 3],
            vec!["a".into()],
            vec![vec![1.0, 2.0, 4.0]],
            2,
        )
        .unwrap();
        assert!(select_donors(&p, &SelectionConfig::default()).is_err());
    }

    #[test]
    fn sampling() {
        let ids: Vec<String> = (0..200).map(|i| format!("d{i}")).collect();
        let a = sample_ids(&ids, 10, 5).unwrap();
        assert_eq!(a, sample_ids(&ids, 10, 5).unwrap());
        assert_eq!(a.len(), 10);
        assert_eq!(sample_ids(&ids[..10], 10, 5).unwrap(), ids[..10].to_vec());
        assert!(matches!(sample_ids(&[], 3, 1), Err(Error::EmptySelection)));
    }
}
