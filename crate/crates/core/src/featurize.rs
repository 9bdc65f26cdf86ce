//! Predictor matrix: current CBC values, per-analyte historical aggregates,
//! imputation and standardization.
//!
//! Rows are assembled "raw" first, with `NaN` marking cells that still need
//! imputation (a missing current CBC value, or a value aggregate of an analyte
//! never measured in the window). [`ScalerStats`] fits imputation fills and
//! standardization moments on training rows only and turns raw rows into
//! finite [`FeatureVector`]s.

use std::io::{Read, Write};

use chrono::{DateTime, Duration, Months, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CbcEvent, Cohort};
use crate::domain::{Analyte, Gender, LabResult, CBC_ANALYTES};
use crate::ingest::Dataset;

pub const SCHEMA_VERSION: &str = "reflex-features/1";
pub const SCHEMA_VERSION_NO_STD: &str = "reflex-features/1-nostd";

/// Historical window runs from `HISTORY_MONTHS` before the anchor up to
/// `EXCLUSION_DAYS` before the event.
pub const HISTORY_MONTHS: u32 = 24;
pub const EXCLUSION_DAYS: i64 = 30;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature schema mismatch: expected `{expected}`, found `{found}`")]
    SchemaVersion { expected: String, found: String },
    #[error("need at least 2 training rows, got {0}")]
    InsufficientData(usize),
    #[error("features file: {0}")]
    Format(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    Mean,
    Std,
    Count,
    Min,
    Max,
    Sum,
}

impl Stat {
    pub const ALL: [Stat; 6] = [
        Stat::Mean,
        Stat::Std,
        Stat::Count,
        Stat::Min,
        Stat::Max,
        Stat::Sum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stat::Mean => "mean",
            Stat::Std => "std",
            Stat::Count => "count",
            Stat::Min => "min",
            Stat::Max => "max",
            Stat::Sum => "sum",
        }
    }

    /// Value aggregates are imputed when the analyte was never measured.
    pub fn needs_fill(self) -> bool {
        matches!(self, Stat::Mean | Stat::Min | Stat::Max | Stat::Sum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    Age,
    GenderMale,
    Current(Analyte),
    History(Analyte, Stat),
}

impl Column {
    pub fn name(&self) -> String {
        match self {
            Column::Age => "age".into(),
            Column::GenderMale => "gender_male".into(),
            Column::Current(a) => format!("cur_{}", a.code()),
            Column::History(a, s) => format!("hist_{}_{}", a.code(), s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: String,
    pub names: Vec<String>,
    pub columns: Vec<Column>,
}

impl FeatureSchema {
    /// Full layout: age, gender, the nine current CBC values, then the
    /// historical aggregates of every catalog analyte.
    pub fn new(include_std: bool) -> Self {
        let mut columns = vec![Column::Age, Column::GenderMale];
        columns.extend(CBC_ANALYTES.iter().map(|&a| Column::Current(a)));
        for &a in Analyte::ALL {
            for s in Stat::ALL {
                if s == Stat::Std && !include_std {
                    continue;
                }
                columns.push(Column::History(a, s));
            }
        }
        let names = columns.iter().map(Column::name).collect();
        let version = if include_std {
            SCHEMA_VERSION
        } else {
            SCHEMA_VERSION_NO_STD
        };
        FeatureSchema {
            version: version.to_string(),
            names,
            columns,
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column_index(&self, col: Column) -> Option<usize> {
        self.columns.iter().position(|&c| c == col)
    }

    pub fn check(&self, version: &str) -> Result<(), FeatureError> {
        if self.version != version {
            return Err(FeatureError::SchemaVersion {
                expected: self.version.clone(),
                found: version.to_string(),
            });
        }
        Ok(())
    }

    /// Rebuilds a known schema from its version tag.
    pub fn from_version(version: &str) -> Result<Self, FeatureError> {
        match version {
            SCHEMA_VERSION => Ok(Self::new(true)),
            SCHEMA_VERSION_NO_STD => Ok(Self::new(false)),
            other => Err(FeatureError::SchemaVersion {
                expected: SCHEMA_VERSION.to_string(),
                found: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorMode {
    /// History window anchored on each event.
    #[default]
    PerEvent,
    /// History window start anchored on the patient's first study CBC.
    PerPatientFirstCbc,
}

/// Six-number summary of one analyte over a history window. With `count == 0`
/// the value aggregates are `None` and must be imputed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateSet {
    pub count: usize,
    pub mean: Option<f64>,
    pub std: f64,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub sum: Option<f64>,
}

impl AggregateSet {
    pub fn get(&self, stat: Stat) -> f64 {
        let v = match stat {
            Stat::Mean => self.mean,
            Stat::Std => Some(self.std),
            Stat::Count => Some(self.count as f64),
            Stat::Min => self.min,
            Stat::Max => self.max,
            Stat::Sum => self.sum,
        };
        v.unwrap_or(f64::NAN)
    }
}

/// One analyte's `(collected_at, value)` series, sorted by time.
pub type Series = [(DateTime<Utc>, f64)];

/// Aggregates over observations with `start <= t <= end`. `std` is the
/// sample (n - 1) standard deviation, 0 for fewer than two values.
pub fn historical_aggregates(
    series: &Series,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> AggregateSet {
    let lo = series.partition_point(|(t, _)| *t < start);
    let hi = series.partition_point(|(t, _)| *t <= end);
    let vals = if lo < hi { &series[lo..hi] } else { &[][..] };
    let n = vals.len();
    if n == 0 {
        return AggregateSet {
            count: 0,
            mean: None,
            std: 0.0,
            min: None,
            max: None,
            sum: None,
        };
    }
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &(_, v) in vals {
        sum += v;
        min = min.min(v);
        max = max.max(v);
    }
    let mean = (sum / n as f64).clamp(min, max);
    let std = if n > 1 {
        let ss: f64 = vals.iter().map(|&(_, v)| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    AggregateSet {
        count: n,
        mean: Some(mean),
        std,
        min: Some(min),
        max: Some(max),
        sum: Some(sum),
    }
}

fn months_before(t: DateTime<Utc>, months: u32) -> DateTime<Utc> {
    t.checked_sub_months(Months::new(months))
        .expect("date in range")
}

/// `[anchor - 24 months, t - 30 days]`, anchor being the event itself or the
/// patient's first study-window CBC.
pub fn resolve_window(
    t: DateTime<Utc>,
    first_cbc: DateTime<Utc>,
    mode: AnchorMode,
) -> (DateTime<Utc>, DateTime<Utc>) {
    let anchor = match mode {
        AnchorMode::PerEvent => t,
        AnchorMode::PerPatientFirstCbc => first_cbc.min(t),
    };
    (
        months_before(anchor, HISTORY_MONTHS),
        t - Duration::days(EXCLUSION_DAYS),
    )
}

/// A patient's results split by analyte.
pub struct PatientHistory {
    series: Vec<Vec<(DateTime<Utc>, f64)>>,
}

impl PatientHistory {
    pub fn new(results: &[LabResult]) -> Self {
        let mut series = vec![Vec::new(); Analyte::ALL.len()];
        for r in results {
            series[r.analyte as usize].push((r.collected_at, r.value));
        }
        PatientHistory { series }
    }

    pub fn series(&self, a: Analyte) -> &Series {
        &self.series[a as usize]
    }
}

/// Pre-imputation row for one event (`NaN` = to impute).
pub fn assemble_raw(
    schema: &FeatureSchema,
    event: &CbcEvent,
    history: &PatientHistory,
    first_cbc: DateTime<Utc>,
    anchor: AnchorMode,
) -> Vec<f64> {
    let (start, end) = resolve_window(event.t, first_cbc, anchor);
    let mut cache: Vec<Option<AggregateSet>> = vec![None; Analyte::ALL.len()];
    schema
        .columns
        .iter()
        .map(|col| match *col {
            Column::Age => event.age_years,
            Column::GenderMale => match event.gender {
                Gender::Male => 1.0,
                Gender::Female => 0.0,
            },
            Column::Current(a) => event.cbc_value(a).unwrap_or(f64::NAN),
            Column::History(a, s) => cache[a as usize]
                .get_or_insert_with(|| historical_aggregates(history.series(a), start, end))
                .get(s),
        })
        .collect()
}

/// Dense row-major matrix of raw rows plus their event metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub schema: FeatureSchema,
    pub event_ids: Vec<String>,
    pub patient_ids: Vec<String>,
    pub labels: Vec<bool>,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(
        schema: FeatureSchema,
        event_ids: Vec<String>,
        patient_ids: Vec<String>,
        labels: Vec<bool>,
        data: Vec<f64>,
    ) -> Result<Self, FeatureError> {
        let n = event_ids.len();
        if patient_ids.len() != n || labels.len() != n || data.len() != n * schema.len() {
            return Err(FeatureError::Format(
                "inconsistent matrix dimensions".into(),
            ));
        }
        Ok(FeatureMatrix {
            schema,
            event_ids,
            patient_ids,
            labels,
            data,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.event_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.schema.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), FeatureError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["event_id", "patient_id", "label"];
        header.extend(self.schema.names.iter().map(String::as_str));
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for i in 0..self.n_rows() {
            rec.clear();
            rec.push(self.event_ids[i].clone());
            rec.push(self.patient_ids[i].clone());
            rec.push((self.labels[i] as u8).to_string());
            rec.extend(self.row(i).iter().map(|v| {
                if v.is_nan() {
                    String::new()
                } else {
                    v.to_string()
                }
            }));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, schema: FeatureSchema) -> Result<Self, FeatureError> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let names: Vec<&str> = header.iter().skip(3).collect();
        if names != schema.names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(FeatureError::Format(
                "column header does not match the schema".into(),
            ));
        }
        let (mut ids, mut pids, mut labels, mut data) = (vec![], vec![], vec![], vec![]);
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| FeatureError::Format(format!("row {}: {what}", i + 2));
            ids.push(rec[0].to_string());
            pids.push(rec[1].to_string());
            labels.push(match &rec[2] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label must be 0 or 1")),
            });
            for cell in rec.iter().skip(3) {
                data.push(if cell.is_empty() {
                    f64::NAN
                } else {
                    cell.parse().map_err(|_| bad("bad number"))?
                });
            }
        }
        FeatureMatrix::new(schema, ids, pids, labels, data)
    }
}

/// Raw rows for every cohort event, in cohort order.
pub fn build_matrix(
    cohort: &Cohort,
    dataset: &Dataset,
    schema: &FeatureSchema,
    anchor: AnchorMode,
) -> FeatureMatrix {
    let firsts = cohort.first_cbc_times();
    // contiguous per-patient groups
    let mut groups = Vec::new();
    let mut i = 0;
    while i < cohort.events.len() {
        let mut j = i;
        while j < cohort.events.len() && cohort.events[j].patient_id == cohort.events[i].patient_id
        {
            j += 1;
        }
        groups.push(i..j);
        i = j;
    }
    let rows: Vec<Vec<f64>> = groups
        .par_iter()
        .flat_map_iter(|g| {
            let pid = &cohort.events[g.start].patient_id;
            let history = PatientHistory::new(dataset.patient_results(pid));
            g.clone()
                .map(|k| assemble_raw(schema, &cohort.events[k], &history, firsts[k], anchor))
                .collect::<Vec<_>>()
        })
        .collect();
    let data = rows.concat();
    FeatureMatrix {
        schema: schema.clone(),
        event_ids: cohort.events.iter().map(|e| e.event_id.clone()).collect(),
        patient_ids: cohort.events.iter().map(|e| e.patient_id.clone()).collect(),
        labels: cohort.events.iter().map(|e| e.label).collect(),
        data,
    }
}

/// Imputation fills and standardization moments, fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerStats {
    pub schema_version: String,
    /// Replacement for `NaN` cells: training mean of the current CBC value, or
    /// the pooled training mean of the analyte for history value aggregates.
    pub fill: Vec<f64>,
    pub mean: Vec<f64>,
    /// Population standard deviation of the imputed training column.
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub schema_version: String,
    pub values: Vec<f64>,
}

impl ScalerStats {
    pub fn fit(matrix: &FeatureMatrix, rows: &[usize]) -> Result<Self, FeatureError> {
        if rows.len() < 2 {
            return Err(FeatureError::InsufficientData(rows.len()));
        }
        let schema = &matrix.schema;
        let d = schema.len();
        let mut fill = vec![0.0; d];
        for (c, col) in schema.columns.iter().enumerate() {
            match *col {
                Column::Current(_) => {
                    let (s, n) = rows
                        .iter()
                        .map(|&r| matrix.row(r)[c])
                        .filter(|v| !v.is_nan())
                        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
                    if n > 0 {
                        fill[c] = s / n as f64;
                    }
                }
                Column::History(a, s) if s.needs_fill() => {
                    let sum_c = schema
                        .column_index(Column::History(a, Stat::Sum))
                        .expect("sum column");
                    let cnt_c = schema
                        .column_index(Column::History(a, Stat::Count))
                        .expect("count column");
                    let (s, n) = rows.iter().fold((0.0, 0.0), |(s, n), &r| {
                        let row = matrix.row(r);
                        if row[cnt_c] > 0.0 {
                            (s + row[sum_c], n + row[cnt_c])
                        } else {
                            (s, n)
                        }
                    });
                    if n > 0.0 {
                        fill[c] = s / n;
                    }
                }
                _ => {}
            }
        }
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        let n = rows.len() as f64;
        let value = |r: usize, c: usize| {
            let v = matrix.row(r)[c];
            if v.is_nan() {
                fill[c]
            } else {
                v
            }
        };
        for c in 0..d {
            let m = rows.iter().map(|&r| value(r, c)).sum::<f64>() / n;
            let var = rows
                .iter()
                .map(|&r| {
                    let x = value(r, c) - m;
                    x * x
                })
                .sum::<f64>()
                / n;
            mean[c] = m;
            let s = var.sqrt();
            std[c] = if s <= 1e-12 * m.abs().max(1.0) {
                0.0
            } else {
                s
            };
        }
        Ok(ScalerStats {
            schema_version: schema.version.clone(),
            fill,
            mean,
            std,
        })
    }

    pub fn check(&self, version: &str) -> Result<(), FeatureError> {
        if self.schema_version != version {
            return Err(FeatureError::SchemaVersion {
                expected: self.schema_version.clone(),
                found: version.to_string(),
            });
        }
        Ok(())
    }

    pub fn impute_into(&self, raw: &[f64], out: &mut [f64]) {
        for (c, (o, &v)) in out.iter_mut().zip(raw).enumerate() {
            *o = if v.is_nan() { self.fill[c] } else { v };
        }
    }

    /// Imputes then standardizes; zero-variance columns map to 0.
    pub fn transform_into(&self, raw: &[f64], out: &mut [f64]) {
        for (c, (o, &v)) in out.iter_mut().zip(raw).enumerate() {
            let x = if v.is_nan() { self.fill[c] } else { v };
            *o = if self.std[c] > 0.0 {
                (x - self.mean[c]) / self.std[c]
            } else {
                0.0
            };
        }
    }

    pub fn transform(&self, raw: &FeatureVector) -> Result<FeatureVector, FeatureError> {
        self.check(&raw.schema_version)?;
        if raw.values.len() != self.mean.len() {
            return Err(FeatureError::Format(
                "row length does not match schema".into(),
            ));
        }
        let mut values = vec![0.0; raw.values.len()];
        self.transform_into(&raw.values, &mut values);
        Ok(FeatureVector {
            schema_version: raw.schema_version.clone(),
            values,
        })
    }

    /// Scaled rows `rows` of `matrix`, row-major.
    pub fn transform_rows(&self, matrix: &FeatureMatrix, rows: &[usize]) -> Vec<f64> {
        let d = matrix.n_cols();
        let mut out = vec![0.0; rows.len() * d];
        out.par_chunks_mut(d.max(1))
            .zip(rows.par_iter())
            .for_each(|(o, &r)| self.transform_into(matrix.row(r), o));
        out
    }
}

/// Builds a single raw row from named values (e.g. a `decide` request);
/// unnamed columns are left for imputation, except counts and stds which
/// default to 0 (no history).
pub fn raw_row_from_named<'a>(
    schema: &FeatureSchema,
    values: impl IntoIterator<Item = (&'a str, f64)>,
) -> Result<FeatureVector, FeatureError> {
    let mut row: Vec<f64> = schema
        .columns
        .iter()
        .map(|c| match c {
            Column::History(_, Stat::Count) | Column::History(_, Stat::Std) => 0.0,
            _ => f64::NAN,
        })
        .collect();
    for (name, v) in values {
        let i = schema
            .index_of(name)
            .ok_or_else(|| FeatureError::Format(format!("unknown feature `{name}`")))?;
        row[i] = v;
    }
    for (c, col) in schema.columns.iter().enumerate() {
        if matches!(col, Column::Age | Column::GenderMale) && row[c].is_nan() {
            return Err(FeatureError::Format(format!(
                "`{}` is required",
                col.name()
            )));
        }
    }
    Ok(FeatureVector {
        schema_version: schema.version.clone(),
        values: row,
    })
}

/// JSON sidecar written next to a features matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub schema: FeatureSchema,
    pub anchor_mode: AnchorMode,
    pub n_rows: usize,
    pub n_positive: usize,
    /// Fitted over all rows; descriptive only. Training refits per run on
    /// its own training partition.
    pub scaler: ScalerStats,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn day(d: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 6, 1, 0, 0, 0).unwrap() + Duration::days(d)
    }

    fn series(vals: &[(i64, f64)]) -> Vec<(DateTime<Utc>, f64)> {
        vals.iter().map(|&(d, v)| (day(d), v)).collect()
    }

    #[test]
    fn aggregates_three_values() {
        let s = series(&[(-100, 10.0), (-90, 20.0), (-80, 30.0)]);
        let a = historical_aggregates(&s, day(-700), day(-30));
        assert_eq!(a.count, 3);
        assert_eq!(a.mean, Some(20.0));
        assert_eq!(a.min, Some(10.0));
        assert_eq!(a.max, Some(30.0));
        assert_eq!(a.sum, Some(60.0));
        // sample std oracle: sqrt(((10-20)^2 + 0 + (30-20)^2) / 2)
        assert!((a.std - 10.0).abs() < 1e-12);
    }

    #[test]
    fn aggregates_single_and_empty() {
        let s = series(&[(-100, 7.0)]);
        let a = historical_aggregates(&s, day(-700), day(-30));
        assert_eq!(
            (a.count, a.mean, a.min, a.max, a.sum, a.std),
            (1, Some(7.0), Some(7.0), Some(7.0), Some(7.0), 0.0)
        );
        let e = historical_aggregates(&s, day(-50), day(-30));
        assert_eq!(e.count, 0);
        assert!(e.get(Stat::Mean).is_nan());
        assert_eq!(e.get(Stat::Std), 0.0);
        assert_eq!(e.get(Stat::Count), 0.0);
    }

    #[test]
    fn window_bounds_inclusive() {
        let s = series(&[(-30, 1.0), (-29, 2.0), (-731, 3.0)]);
        let (start, end) = resolve_window(day(0), day(0), AnchorMode::PerEvent);
        assert_eq!(end, day(-30));
        let a = historical_aggregates(&s, start, end);
        assert_eq!(a.count, 1);
        assert_eq!(a.sum, Some(1.0));
    }

    #[test]
    fn window_modes() {
        let t1 = Utc.with_ymd_and_hms(2021, 1, 15, 9, 0, 0).unwrap();
        let t2 = Utc.with_ymd_and_hms(2021, 12, 15, 9, 0, 0).unwrap();
        let (s, e) = resolve_window(t2, t1, AnchorMode::PerEvent);
        assert_eq!(s, Utc.with_ymd_and_hms(2019, 12, 15, 9, 0, 0).unwrap());
        assert_eq!(e, t2 - Duration::days(30));
        let (s, _) = resolve_window(t2, t1, AnchorMode::PerPatientFirstCbc);
        assert_eq!(s, Utc.with_ymd_and_hms(2019, 1, 15, 9, 0, 0).unwrap());
        assert_eq!(
            resolve_window(t1, t1, AnchorMode::PerEvent),
            resolve_window(t1, t1, AnchorMode::PerPatientFirstCbc)
        );
    }

    #[test]
    fn schema_layout() {
        let s = FeatureSchema::new(true);
        assert_eq!(s.len(), 2 + 9 + Analyte::ALL.len() * 6);
        assert_eq!(s.names[0], "age");
        assert_eq!(s.names[2], "cur_HGB");
        assert!(s.index_of("hist_FERR_count").is_some());
        let mut names = s.names.clone();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), s.len());
        let ns = FeatureSchema::new(false);
        assert_eq!(ns.len(), 2 + 9 + Analyte::ALL.len() * 5);
        assert!(ns.index_of("hist_FERR_std").is_none());
        assert!(s.check(&ns.version).is_err());
    }

    fn matrix(cols: &[&[f64]]) -> FeatureMatrix {
        // Builds a matrix over the full schema with the given leading columns,
        // every other cell zero.
        let schema = FeatureSchema::new(true);
        let n = cols[0].len();
        let d = schema.len();
        let mut data = vec![0.0; n * d];
        for (c, col) in cols.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                data[r * d + c] = v;
            }
        }
        FeatureMatrix::new(
            schema,
            (0..n).map(|i| format!("e{i}")).collect(),
            (0..n).map(|i| format!("p{i}")).collect(),
            vec![false; n],
            data,
        )
        .unwrap()
    }

    #[test]
    fn scaler_population_moments() {
        let m = matrix(&[&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]]);
        let s = ScalerStats::fit(&m, &[0, 1, 2]).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 1e-15);
        assert!((s.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let z = s.transform_rows(&m, &[0, 1, 2]);
        let d = m.n_cols();
        assert!((z[0] + 1.224744871391589).abs() < 1e-12);
        assert!(z[d].abs() < 1e-15);
        assert!((z[2 * d] - 1.224744871391589).abs() < 1e-12);
        // constant column
        assert_eq!(s.std[1], 0.0);
        assert_eq!(z[1], 0.0);
        assert!(matches!(
            ScalerStats::fit(&m, &[0]),
            Err(FeatureError::InsufficientData(1))
        ));
    }

    #[test]
    fn scaler_identity_on_standardized_column() {
        let x: Vec<f64> = vec![-1.5, -0.5, 0.5, 1.5];
        let m0 = x.iter().sum::<f64>() / 4.0;
        let sd = (x.iter().map(|v| (v - m0) * (v - m0)).sum::<f64>() / 4.0).sqrt();
        let z: Vec<f64> = x.iter().map(|v| (v - m0) / sd).collect();
        let m = matrix(&[&z]);
        let s = ScalerStats::fit(&m, &[0, 1, 2, 3]).unwrap();
        assert!(s.mean[0].abs() < 1e-12);
        assert!((s.std[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn imputation_fills() {
        let schema = FeatureSchema::new(true);
        let d = schema.len();
        let hct = schema.index_of("cur_HCT").unwrap();
        let fm = schema.index_of("hist_FERR_mean").unwrap();
        let fs = schema.index_of("hist_FERR_sum").unwrap();
        let fc = schema.index_of("hist_FERR_count").unwrap();
        let mut data = vec![0.0; 3 * d];
        data[hct] = 40.0;
        data[d + hct] = f64::NAN;
        data[2 * d + hct] = 44.0;
        // row 0: two ferritins summing to 30; row 1: one of 60; row 2: none
        for (r, (cnt, sum)) in [(2.0, 30.0), (1.0, 60.0), (0.0, f64::NAN)]
            .iter()
            .enumerate()
        {
            data[r * d + fc] = *cnt;
            data[r * d + fs] = *sum;
            data[r * d + fm] = if *cnt > 0.0 { sum / cnt } else { f64::NAN };
        }
        let m = FeatureMatrix::new(
            schema,
            vec!["a".into(), "b".into(), "c".into()],
            vec!["p".into(), "q".into(), "r".into()],
            vec![true, false, false],
            data,
        )
        .unwrap();
        let s = ScalerStats::fit(&m, &[0, 1, 2]).unwrap();
        assert_eq!(s.fill[hct], 42.0);
        assert_eq!(s.fill[fm], 30.0);
        let mut out = vec![0.0; d];
        s.impute_into(m.row(2), &mut out);
        assert_eq!(out[fm], 30.0);
        assert_eq!(out[fs], 30.0);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn named_rows() {
        let schema = FeatureSchema::new(true);
        let r = raw_row_from_named(
            &schema,
            [("age", 50.0), ("gender_male", 1.0), ("cur_HCT", 38.0)],
        )
        .unwrap();
        assert_eq!(r.values[schema.index_of("cur_HCT").unwrap()], 38.0);
        assert!(r.values[schema.index_of("cur_MCV").unwrap()].is_nan());
        assert_eq!(r.values[schema.index_of("hist_FERR_count").unwrap()], 0.0);
        assert!(raw_row_from_named(&schema, [("nope", 1.0)]).is_err());
        assert!(raw_row_from_named(&schema, [("age", 1.0)]).is_err());
    }
}
