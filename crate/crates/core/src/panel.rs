//! Panel data model: one target series, a pool of donor series and an
//! intervention index, plus CSV ingestion/emission, pre-period
//! normalisation and bucketed time averaging.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIME_COLUMN: &str = "time";

/// Observed target, donor matrix and intervention index.
///
/// `intervention` is the 0-based position of the first post-intervention
/// observation; `times[intervention]` is the corresponding time label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    times: Vec<i64>,
    target_id: String,
    target: Vec<f64>,
    donor_ids: Vec<String>,
    donors: Vec<Vec<f64>>,
    intervention: usize,
}

impl Panel {
    pub fn new(
        times: Vec<i64>,
        target_id: impl Into<String>,
        target: Vec<f64>,
        donor_ids: Vec<String>,
        donors: Vec<Vec<f64>>,
        intervention: usize,
    ) -> Result<Self> {
        let t = times.len();
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("times", "must be strictly increasing"));
        }
        if target.len() != t {
            return Err(Error::validation(
                "target",
                format!("length {} does not match {} time points", target.len(), t),
            ));
        }
        if donor_ids.len() != donors.len() {
            return Err(Error::validation(
                "donor_ids",
                format!("{} ids for {} donor series", donor_ids.len(), donors.len()),
            ));
        }
        if donors.is_empty() {
            return Err(Error::validation("donors", "at least one donor is required"));
        }
        for (id, series) in donor_ids.iter().zip(&donors) {
            if series.len() != t {
                return Err(Error::validation(
                    format!("donor {id}"),
                    format!("length {} does not match {} time points", series.len(), t),
                ));
            }
            if series.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("donor {id}"), "non-finite value"));
            }
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("target", "non-finite value"));
        }
        if intervention < 1 || intervention + 1 > t {
            return Err(Error::validation(
                "intervention_time",
                format!(
                    "index {intervention} leaves no pre- or post-intervention data in {t} points"
                ),
            ));
        }
        Ok(Panel {
            times,
            target_id: target_id.into(),
            target,
            donor_ids,
            donors,
            intervention,
        })
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn target_id(&self) -> &str {
        &self.target_id
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn donor_ids(&self) -> &[String] {
        &self.donor_ids
    }

    pub fn donor(&self, i: usize) -> &[f64] {
        &self.donors[i]
    }

    pub fn donors(&self) -> &[Vec<f64>] {
        &self.donors
    }

    pub fn n_donors(&self) -> usize {
        self.donors.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Index of the first post-intervention point; equals the number of pre points.
    pub fn intervention_index(&self) -> usize {
        self.intervention
    }

    /// Time label of the first post-intervention point.
    pub fn intervention_time(&self) -> i64 {
        self.times[self.intervention]
    }

    pub fn n_pre(&self) -> usize {
        self.intervention
    }

    pub fn n_post(&self) -> usize {
        self.times.len() - self.intervention
    }

    /// Intervention indicator I^t.
    pub fn indicator(&self) -> Vec<f64> {
        (0..self.n_times())
            .map(|t| if t >= self.intervention { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn donor_index(&self, id: &str) -> Option<usize> {
        self.donor_ids.iter().position(|d| d == id)
    }

    /// Resolves ids to donor indices, erroring on the first unknown id.
    pub fn donor_indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        let lookup: HashMap<&str, usize> = self
            .donor_ids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.as_str(), i))
            .collect();
        ids.iter()
            .map(|id| {
                lookup
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::validation("donor_ids", format!("unknown donor `{id}`")))
            })
            .collect()
    }

    /// Replaces the target series, keeping everything else.
    pub fn with_target(&self, target: Vec<f64>) -> Result<Panel> {
        Panel::new(
            self.times.clone(),
            self.target_id.clone(),
            target,
            self.donor_ids.clone(),
            self.donors.clone(),
            self.intervention,
        )
    }

    /// Appends a donor series.
    pub fn with_donor(&self, id: impl Into<String>, series: Vec<f64>) -> Result<Panel> {
        let id = id.into();
        if self.donor_index(&id).is_some() {
            return Err(Error::validation("donor_ids", format!("duplicate donor `{id}`")));
        }
        let mut ids = self.donor_ids.clone();
        ids.push(id);
        let mut donors = self.donors.clone();
        donors.push(series);
        Panel::new(
            self.times.clone(),
            self.target_id.clone(),
            self.target.clone(),
            ids,
            donors,
            self.intervention,
        )
    }

    /// Keeps only the listed donors, in the listed order.
    pub fn select_donors(&self, ids: &[String]) -> Result<Panel> {
        let idx = self.donor_indices(ids)?;
        Panel::new(
            self.times.clone(),
            self.target_id.clone(),
            self.target.clone(),
            ids.to_vec(),
            idx.iter().map(|&i| self.donors[i].clone()).collect(),
            self.intervention,
        )
    }

    /// Drops every time point after `last_index` (inclusive bound).
    pub fn truncate_after(&self, last_index: usize) -> Result<Panel> {
        let end = (last_index + 1).min(self.n_times());
        Panel::new(
            self.times[..end].to_vec(),
            self.target_id.clone(),
            self.target[..end].to_vec(),
            self.donor_ids.clone(),
            self.donors.iter().map(|d| d[..end].to_vec()).collect(),
            self.intervention,
        )
    }
}

/// Per-donor pre-intervention mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl NormalizationParams {
    /// Inverts [`normalize`] on a panel with the same donor layout.
    pub fn denormalize(&self, panel: &Panel) -> Result<Panel> {
        if panel.n_donors() != self.means.len() {
            return Err(Error::validation(
                "donors",
                "normalization parameters do not match the panel",
            ));
        }
        let donors = panel
            .donors
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(d, (&m, &s))| d.iter().map(|v| v * s + m).collect())
            .collect();
        Panel::new(
            panel.times.clone(),
            panel.target_id.clone(),
            panel.target.clone(),
            panel.donor_ids.clone(),
            donors,
            panel.intervention,
        )
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (divisor n - 1).
pub(crate) fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Z-scores every donor with its own pre-intervention mean and sample std,
/// applied across all time points. The target is left untouched.
pub fn normalize(panel: &Panel) -> Result<(Panel, NormalizationParams)> {
    let pre = panel.n_pre();
    let mut means = Vec::with_capacity(panel.n_donors());
    let mut stds = Vec::with_capacity(panel.n_donors());
    let mut donors = Vec::with_capacity(panel.n_donors());
    for (id, series) in panel.donor_ids.iter().zip(&panel.donors) {
        let m = mean(&series[..pre]);
        let s = sample_std(&series[..pre]);
        // a near-constant series relative to its level is as degenerate as an exact one
        if !s.is_finite() || s <= 1e-12 * m.abs().max(1e-300) {
            return Err(Error::validation(
                format!("donor {id}"),
                "zero pre-intervention variance",
            ));
        }
        donors.push(series.iter().map(|v| (v - m) / s).collect());
        means.push(m);
        stds.push(s);
    }
    let out = Panel::new(
        panel.times.clone(),
        panel.target_id.clone(),
        panel.target.clone(),
        panel.donor_ids.clone(),
        donors,
        panel.intervention,
    )?;
    Ok((out, NormalizationParams { means, stds }))
}

/// Replaces target and donors with per-bucket means.
///
/// Buckets are anchored at the intervention: pre buckets run backward from
/// the last pre point, post buckets forward from the first post point, so no
/// bucket mixes the two regimes. Incomplete buckets at either end are
/// dropped. Each bucket is labelled with its first original time.
pub fn time_average(panel: &Panel, bucket: usize) -> Result<Panel> {
    if bucket == 0 {
        return Err(Error::validation("bucket", "must be at least 1"));
    }
    let pre = panel.n_pre();
    let post = panel.n_post();
    if bucket > pre {
        return Err(Error::validation(
            "bucket",
            format!("{bucket} exceeds the {pre} pre-intervention points"),
        ));
    }
    if bucket > post {
        return Err(Error::validation(
            "bucket",
            format!("{bucket} exceeds the {post} post-intervention points"),
        ));
    }
    let n_pre_b = pre / bucket;
    let n_post_b = post / bucket;
    let start = pre - n_pre_b * bucket;
    let starts: Vec<usize> = (0..n_pre_b)
        .map(|b| start + b * bucket)
        .chain((0..n_post_b).map(|b| pre + b * bucket))
        .collect();
    let avg = |series: &[f64]| -> Vec<f64> {
        starts
            .iter()
            .map(|&s| mean(&series[s..s + bucket]))
            .collect()
    };
    Panel::new(
        starts.iter().map(|&s| panel.times[s]).collect(),
        panel.target_id.clone(),
        avg(&panel.target),
        panel.donor_ids.clone(),
        panel.donors.iter().map(|d| avg(d)).collect(),
        n_pre_b,
    )
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let s = raw.trim();
    let err = |message: &str| Error::Ingest {
        row,
        column: column.to_string(),
        message: message.to_string(),
    };
    if s.is_empty() {
        return Err(err("blank cell"));
    }
    let v: f64 = s
        .parse()
        .map_err(|_| err(&format!("non-numeric value `{s}`")))?;
    if !v.is_finite() {
        return Err(err(&format!("non-finite value `{s}`")));
    }
    Ok(v)
}

/// Reads a wide panel CSV: a mandatory integer `time` column, the target
/// column, and every other column as a numeric donor.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    target_column: &str,
    intervention_time: i64,
) -> Result<Panel> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, target_column, intervention_time)
}

pub fn ingest_reader<R: Read>(
    reader: R,
    target_column: &str,
    intervention_time: i64,
) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| Error::Ingest {
        row: 1,
        column: name.to_string(),
        message: "missing column".into(),
    };
    let time_col = col(TIME_COLUMN).ok_or_else(|| missing(TIME_COLUMN))?;
    let target_col = col(target_column).ok_or_else(|| missing(target_column))?;
    let donor_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != time_col && c != target_col)
        .collect();
    if donor_cols.is_empty() {
        return Err(Error::Ingest {
            row: 1,
            column: "<donors>".into(),
            message: "no donor columns".into(),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for &c in &donor_cols {
        if !seen.insert(&headers[c]) {
            return Err(Error::Ingest {
                row: 1,
                column: headers[c].to_string(),
                message: "duplicate column name".into(),
            });
        }
    }

    let mut rows: Vec<(i64, f64, Vec<f64>)> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Ingest {
                row,
                column: "<row>".into(),
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let traw = rec[time_col].trim();
        let t: i64 = traw.parse().map_err(|_| Error::Ingest {
            row,
            column: TIME_COLUMN.into(),
            message: format!("non-integer time `{traw}`"),
        })?;
        let y = parse_cell(&rec[target_col], row, target_column)?;
        let xs = donor_cols
            .iter()
            .map(|&c| parse_cell(&rec[c], row, &headers[c]))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((t, y, xs));
    }
    if rows.is_empty() {
        return Err(Error::Ingest {
            row: 2,
            column: "<row>".into(),
            message: "no data rows".into(),
        });
    }
    // stable sort keeps the original row order for the duplicate message
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| rows[i].0);
    for w in order.windows(2) {
        if rows[w[0]].0 == rows[w[1]].0 {
            return Err(Error::Ingest {
                row: w[1] + 2,
                column: TIME_COLUMN.into(),
                message: format!("duplicate time index {}", rows[w[1]].0),
            });
        }
    }
    let times: Vec<i64> = order.iter().map(|&i| rows[i].0).collect();
    if let Some(w) = times.windows(2).find(|w| w[1] - w[0] != 1) {
        return Err(Error::Ingest {
            row: 0,
            column: TIME_COLUMN.into(),
            message: format!("gap in time index between {} and {}", w[0], w[1]),
        });
    }
    let intervention = times
        .iter()
        .position(|&t| t == intervention_time)
        .ok_or_else(|| Error::validation(
            "intervention_time",
            format!("{intervention_time} is outside the observed range"),
        ))?;
    let target: Vec<f64> = order.iter().map(|&i| rows[i].1).collect();
    let donors: Vec<Vec<f64>> = (0..donor_cols.len())
        .map(|j| order.iter().map(|&i| rows[i].2[j]).collect())
        .collect();
    let donor_ids = donor_cols.iter().map(|&c| headers[c].to_string()).collect();
    Panel::new(times, target_column, target, donor_ids, donors, intervention)
}

/// Writes the panel in the ingestion format. Values use Rust's shortest
/// round-trip representation, so re-ingesting yields identical doubles.
pub fn emit_csv<W: Write>(panel: &Panel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![TIME_COLUMN.to_string(), panel.target_id.clone()];
    header.extend(panel.donor_ids.iter().cloned());
    w.write_record(&header)?;
    for t in 0..panel.n_times() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(panel.times[t].to_string());
        rec.push(format!("{:?}", panel.target[t]));
        rec.extend(panel.donors.iter().map(|d| format!("{:?}", d[t])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(panel: &Panel, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    emit_csv(panel, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_csv() -> &'static str {
        "time,target,d1\n1,1.0,2.0\n2,2.0,3.0\n3,3.0,4.0\n"
    }

    fn panel_from(series: Vec<Vec<f64>>, intervention: usize) -> Panel {
        let t = series[0].len();
        let ids = (0..series.len()).map(|i| format!("d{i}")).collect();
        Panel::new(
            (0..t as i64).collect(),
            "y",
            vec![0.0; t],
            ids,
            series,
            intervention,
        )
        .unwrap()
    }

    #[test]
    fn ingest_three_rows() {
        let p = ingest_reader(small_csv().as_bytes(), "target", 3).unwrap();
        assert_eq!(p.n_donors(), 1);
        assert_eq!(p.n_times(), 3);
        assert_eq!(p.n_pre(), 2);
        assert_eq!(p.donor(0), &[2.0, 3.0, 4.0]);
        assert_eq!(p.intervention_time(), 3);
    }

    #[test]
    fn ingest_rejects_no_pre_period() {
        let err = ingest_reader(small_csv().as_bytes(), "target", 1).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }

    #[test]
    fn ingest_rejects_out_of_range_intervention() {
        assert!(ingest_reader(small_csv().as_bytes(), "target", 9).is_err());
    }

    #[test]
    fn ingest_sorts_rows_by_time() {
        let csv = "d1,time,target\n4.0,3,3.0\n2.0,1,1.0\n3.0,2,2.0\n";
        let p = ingest_reader(csv.as_bytes(), "target", 3).unwrap();
        assert_eq!(p.times(), &[1, 2, 3]);
        assert_eq!(p.target(), &[1.0, 2.0, 3.0]);
        assert_eq!(p.donor(0), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn ingest_errors_name_row_and_column() {
        let cases = [
            ("time,target,d1\n1,1.0,2.0\n2,abc,3.0\n3,3.0,4.0\n", 3, "target"),
            ("time,target,d1\n1,1.0,2.0\n2,2.0,\n3,3.0,4.0\n", 3, "d1"),
            ("time,target,d1\n1,1.0,2.0\n2,2.0,NaN\n3,3.0,4.0\n", 3, "d1"),
            ("time,target,d1\n1,1.0,2.0\n2,2.0,inf\n3,3.0,4.0\n", 3, "d1"),
            ("time,target,d1\n1,1.0,2.0\n1.5,2.0,3.0\n3,3.0,4.0\n", 3, "time"),
            ("time,target,d1\n1,1.0,2.0\n2,2.0,3.0\n2,3.0,4.0\n", 4, "time"),
        ];
        for (csv, want_row, want_col) in cases {
            match ingest_reader(csv.as_bytes(), "target", 2) {
                Err(Error::Ingest { row, column, .. }) => {
                    assert_eq!((row, column.as_str()), (want_row, want_col), "{csv}")
                }
                other => panic!("expected ingest error for {csv:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn ingest_missing_columns() {
        let no_time = "t,target,d1\n1,1,2\n2,2,3\n";
        assert!(matches!(
            ingest_reader(no_time.as_bytes(), "target", 2),
            Err(Error::Ingest { ref column, .. }) if column == "time"
        ));
        let no_target = "time,y,d1\n1,1,2\n2,2,3\n";
        assert!(matches!(
            ingest_reader(no_target.as_bytes(), "target", 2),
            Err(Error::Ingest { ref column, .. }) if column == "target"
        ));
        let no_donor = "time,target\n1,1\n2,2\n";
        assert!(ingest_reader(no_donor.as_bytes(), "target", 2).is_err());
    }

    #[test]
    fn ingest_rejects_time_gaps() {
        let csv = "time,target,d1\n1,1,2\n2,2,3\n4,3,4\n";
        assert!(ingest_reader(csv.as_bytes(), "target", 2).is_err());
    }

    #[test]
    fn normalize_two_point_zscore() {
        let p = panel_from(vec![vec![1.0, 3.0, 10.0]], 2);
        let (n, params) = normalize(&p).unwrap();
        let d = n.donor(0);
        // sample std of (1, 3) is sqrt(2)
        let s = 2f64.sqrt();
        assert!((d[0] + 1.0 / s).abs() < 1e-15);
        assert!((d[1] - 1.0 / s).abs() < 1e-15);
        assert!((d[2] - 8.0 / s).abs() < 1e-14);
        assert_eq!(params.means, vec![2.0]);
        assert_eq!(n.target(), p.target());
    }

    #[test]
    fn normalize_rejects_constant_donor() {
        let p = panel_from(vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 5.0, 5.0, 9.0]], 3);
        match normalize(&p) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "donor d1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn normalize_is_affine_invariant() {
        let base = vec![0.3, -1.2, 2.5, 0.7, 1.9, -0.4];
        let scaled: Vec<f64> = base.iter().map(|v| 10.0 * v + 7.0).collect();
        let (a, _) = normalize(&panel_from(vec![base], 4)).unwrap();
        let (b, _) = normalize(&panel_from(vec![scaled], 4)).unwrap();
        for (x, y) in a.donor(0).iter().zip(b.donor(0)) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn time_average_example() {
        let p = panel_from(vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]], 3);
        let a = time_average(&p, 3).unwrap();
        assert_eq!(a.donor(0), &[2.0, 5.0]);
        assert_eq!(a.intervention_index(), 1);
        assert_eq!(a.times(), &[0, 3]);
    }

    #[test]
    fn time_average_drops_partial_leading_bucket() {
        let p = panel_from(vec![(0..10).map(|v| v as f64).collect()], 7);
        let a = time_average(&p, 3).unwrap();
        // pre buckets {1,2,3},{4,5,6}; post {7,8,9}
        assert_eq!(a.donor(0), &[2.0, 5.0, 8.0]);
        assert_eq!(a.intervention_index(), 2);
    }

    #[test]
    fn time_average_hundred_pre_thirty_post() {
        let series: Vec<f64> = (0..130).map(|v| (v as f64).sin()).collect();
        let p = panel_from(vec![series], 100);
        let a = time_average(&p, 5).unwrap();
        assert_eq!(a.n_pre(), 20);
        assert_eq!(a.n_post(), 6);
    }

    #[test]
    fn time_average_rejects_oversized_bucket() {
        let p = panel_from(vec![vec![1.0, 2.0, 3.0, 4.0, 5.0]], 3);
        assert!(time_average(&p, 3).is_err());
        assert!(time_average(&p, 0).is_err());
    }

    #[test]
    fn roundtrip_csv_exact() {
        let p = panel_from(
            vec![vec![0.1, 1.0 / 3.0, -2.5e-17, 1e300], vec![f64::MIN_POSITIVE, 2.0, 3.0, 4.0]],
            2,
        )
        .with_target(vec![std::f64::consts::PI, 1.0, -0.0, 5e-324])
        .unwrap();
        let mut buf = Vec::new();
        emit_csv(&p, &mut buf).unwrap();
        let back = ingest_reader(buf.as_slice(), "y", p.intervention_time()).unwrap();
        assert_eq!(back, p);
    }

    fn arb_panel() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
        (2usize..12, 1usize..4).prop_flat_map(|(t, n)| {
            (
                prop::collection::vec(prop::collection::vec(-1e3f64..1e3, t..=t), n..=n),
                1..t,
            )
        })
    }

    proptest! {
        #[test]
        fn normalize_roundtrip((series, iv) in arb_panel()) {
            let p = panel_from(series, iv);
            if let Ok((n, params)) = normalize(&p) {
                let back = params.denormalize(&n).unwrap();
                for (j, (a, b)) in back.donors().iter().zip(p.donors()).enumerate() {
                    let scale = params.means[j].abs().max(params.stds[j]);
                    for (x, y) in a.iter().zip(b) {
                        prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(scale));
                    }
                }
            }
        }

        #[test]
        fn bucket_one_is_identity((series, iv) in arb_panel()) {
            let p = panel_from(series, iv);
            let a = time_average(&p, 1).unwrap();
            prop_assert_eq!(a, p);
        }

        #[test]
        fn no_bucket_straddles_intervention(
            pre in 1usize..30, post in 1usize..30, bucket in 1usize..8
        ) {
            let t = pre + post;
            let p = panel_from(vec![(0..t).map(|v| v as f64).collect()], pre);
            if let Ok(a) = time_average(&p, bucket) {
                // series is the time index, so a bucket mean identifies its span
                for (k, &m) in a.donor(0).iter().enumerate() {
                    let first = m - (bucket as f64 - 1.0) / 2.0;
                    let last = m + (bucket as f64 - 1.0) / 2.0;
                    if k < a.n_pre() {
                        prop_assert!(last < pre as f64);
                    } else {
                        prop_assert!(first >= pre as f64);
                    }
                }
            }
        }

        #[test]
        fn csv_roundtrip_property((series, iv) in arb_panel()) {
            let p = panel_from(series, iv);
            let mut buf = Vec::new();
            emit_csv(&p, &mut buf).unwrap();
            let back = ingest_reader(buf.as_slice(), "y", p.intervention_time()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
