//! CBC-events and their "ferritin ordered" labels.

use std::io::{Read, Write};

use chrono::{DateTime, Duration, NaiveDate, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{Analyte, Gender, LabResult, CBC_ANALYTES};
use crate::ingest::{format_timestamp, Dataset};

/// Look-back for filling a CBC parameter not reported at the event time.
pub const CBC_BACKFILL_DAYS: i64 = 30;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("no CBC events in the study window")]
    EmptyCohort,
    #[error("study window start {0} is after end {1}")]
    BadWindow(NaiveDate, NaiveDate),
    #[error("invalid label policy: {0}")]
    BadPolicy(String),
    #[error("cohort file: {0}")]
    Format(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Inclusive range of calendar days (UTC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl StudyWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self, CohortError> {
        if start > end {
            return Err(CohortError::BadWindow(start, end));
        }
        Ok(StudyWindow { start, end })
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        let d = t.date_naive();
        d >= self.start && d <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Primary,
    Refined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelPolicy {
    pub mode: LabelMode,
    pub post_window: Duration,
    /// Only consulted in refined mode.
    pub pre_window: Duration,
}

impl LabelPolicy {
    pub fn primary() -> Self {
        LabelPolicy {
            mode: LabelMode::Primary,
            post_window: Duration::days(30),
            pre_window: Duration::hours(1),
        }
    }

    pub fn refined() -> Self {
        LabelPolicy {
            mode: LabelMode::Refined,
            ..Self::primary()
        }
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        if self.post_window <= Duration::zero() {
            return Err(CohortError::BadPolicy(
                "post window must be positive".into(),
            ));
        }
        if self.mode == LabelMode::Refined && self.pre_window <= Duration::zero() {
            return Err(CohortError::BadPolicy("pre window must be positive".into()));
        }
        Ok(())
    }

    /// Whether a ferritin collected at `at` counts for a CBC at `t`.
    pub fn covers(&self, t: DateTime<Utc>, at: DateTime<Utc>) -> bool {
        let primary = at >= t && at <= t + self.post_window;
        match self.mode {
            LabelMode::Primary => primary,
            LabelMode::Refined => primary || (at >= t - self.pre_window && at < t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbcEvent {
    pub event_id: String,
    pub patient_id: String,
    pub t: DateTime<Utc>,
    /// Indexed like [`CBC_ANALYTES`].
    pub cbc: [Option<f64>; 9],
    pub label: bool,
    pub age_years: f64,
    pub gender: Gender,
}

impl CbcEvent {
    pub fn cbc_value(&self, analyte: Analyte) -> Option<f64> {
        analyte.cbc_index().and_then(|i| self.cbc[i])
    }
}

/// Deterministic event id: first 16 hex chars of sha256(patient_id | t).
pub fn event_id(patient_id: &str, t: DateTime<Utc>) -> String {
    let mut h = Sha256::new();
    h.update(patient_id.as_bytes());
    h.update(b"|");
    h.update(format_timestamp(t).as_bytes());
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub n_events: usize,
    pub n_patients: usize,
    pub n_positive: usize,
    pub positive_rate: f64,
}

impl CohortStats {
    pub fn compute(events: &[CbcEvent]) -> Self {
        let n_events = events.len();
        let n_positive = events.iter().filter(|e| e.label).count();
        let mut ids: Vec<&str> = events.iter().map(|e| e.patient_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        CohortStats {
            n_events,
            n_patients: ids.len(),
            n_positive,
            positive_rate: if n_events == 0 {
                0.0
            } else {
                n_positive as f64 / n_events as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    /// Sorted by `(patient_id, t)`.
    pub events: Vec<CbcEvent>,
    pub stats: CohortStats,
    pub policy: LabelPolicy,
}

fn extract_patient_events(
    results: &[LabResult],
    window: StudyWindow,
    gender: Gender,
    birth: NaiveDate,
) -> Vec<CbcEvent> {
    let backfill = Duration::days(CBC_BACKFILL_DAYS);
    let mut events = Vec::new();
    let mut i = 0;
    while i < results.len() {
        let t = results[i].collected_at;
        let mut j = i;
        while j < results.len() && results[j].collected_at == t {
            j += 1;
        }
        let group = &results[i..j];
        if window.contains(t) && group.iter().any(|r| r.analyte.is_cbc()) {
            let mut cbc = [None; 9];
            for r in group {
                if let Some(k) = r.analyte.cbc_index() {
                    cbc[k] = Some(r.value);
                }
            }
            for (k, slot) in cbc.iter_mut().enumerate() {
                if slot.is_none() {
                    // most recent prior value within the look-back, strictly before t
                    *slot = results[..i]
                        .iter()
                        .rev()
                        .take_while(|r| r.collected_at >= t - backfill)
                        .find(|r| r.analyte == CBC_ANALYTES[k])
                        .map(|r| r.value);
                }
            }
            let patient_id = results[i].patient_id.clone();
            let age_years = crate::domain::age_at(birth, t).unwrap_or(0.0);
            events.push(CbcEvent {
                event_id: event_id(&patient_id, t),
                patient_id,
                t,
                cbc,
                label: false,
                age_years,
                gender,
            });
        }
        i = j;
    }
    events
}

/// One unlabeled event per distinct (patient, timestamp) with a CBC result
/// inside the window.
pub fn extract_cbc_events(dataset: &Dataset, window: StudyWindow) -> Vec<CbcEvent> {
    let patients: Vec<_> = dataset.patients.values().collect();
    patients
        .par_iter()
        .flat_map_iter(|p| {
            extract_patient_events(
                dataset.patient_results(&p.patient_id),
                window,
                p.gender,
                p.birth_date,
            )
        })
        .collect()
}

/// `ferritin_results` must belong to the event's patient.
pub fn label_event(event: &CbcEvent, ferritin_results: &[LabResult], policy: &LabelPolicy) -> bool {
    ferritin_results
        .iter()
        .filter(|r| r.analyte == Analyte::Ferritin)
        .any(|r| policy.covers(event.t, r.collected_at))
}

pub fn build_cohort(
    dataset: &Dataset,
    window: StudyWindow,
    policy: LabelPolicy,
) -> Result<Cohort, CohortError> {
    policy.validate()?;
    let mut events = extract_cbc_events(dataset, window);
    if events.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    events.par_iter_mut().for_each(|e| {
        e.label = label_event(e, dataset.patient_results(&e.patient_id), &policy);
    });
    let stats = CohortStats::compute(&events);
    Ok(Cohort {
        events,
        stats,
        policy,
    })
}

impl Cohort {
    pub fn from_events(events: Vec<CbcEvent>, policy: LabelPolicy) -> Result<Self, CohortError> {
        if events.is_empty() {
            return Err(CohortError::EmptyCohort);
        }
        let stats = CohortStats::compute(&events);
        Ok(Cohort {
            events,
            stats,
            policy,
        })
    }

    /// Same events, labels recomputed under `policy`.
    pub fn relabel(&self, dataset: &Dataset, policy: LabelPolicy) -> Result<Cohort, CohortError> {
        policy.validate()?;
        let mut events = self.events.clone();
        events.par_iter_mut().for_each(|e| {
            e.label = label_event(e, dataset.patient_results(&e.patient_id), &policy);
        });
        Cohort::from_events(events, policy)
    }

    /// Earliest event time for each event's patient (index-aligned).
    pub fn first_cbc_times(&self) -> Vec<DateTime<Utc>> {
        let mut out = Vec::with_capacity(self.events.len());
        let mut i = 0;
        while i < self.events.len() {
            let mut j = i;
            let mut first = self.events[i].t;
            while j < self.events.len() && self.events[j].patient_id == self.events[i].patient_id {
                first = first.min(self.events[j].t);
                j += 1;
            }
            out.extend(std::iter::repeat(first).take(j - i));
            i = j;
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CohortError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "event_id".to_string(),
            "patient_id".into(),
            "t".into(),
            "label".into(),
            "age_years".into(),
            "gender".into(),
        ];
        header.extend(CBC_ANALYTES.iter().map(|a| a.code().to_string()));
        w.write_record(&header)?;
        for e in &self.events {
            let mut row = vec![
                e.event_id.clone(),
                e.patient_id.clone(),
                format_timestamp(e.t),
                (e.label as u8).to_string(),
                e.age_years.to_string(),
                e.gender.code().to_string(),
            ];
            row.extend(
                e.cbc
                    .iter()
                    .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| CohortError::Format(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, policy: LabelPolicy) -> Result<Cohort, CohortError> {
        let mut rdr = csv::Reader::from_reader(input);
        let bad = |line: usize, what: &str| CohortError::Format(format!("row {line}: {what}"));
        let mut events = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != 15 {
                return Err(bad(line, "expected 15 fields"));
            }
            let t = DateTime::parse_from_rfc3339(&rec[2])
                .map_err(|_| bad(line, "bad timestamp"))?
                .with_timezone(&Utc);
            let label = match &rec[3] {
                "1" => true,
                "0" => false,
                _ => return Err(bad(line, "label must be 0 or 1")),
            };
            let age_years = rec[4].parse().map_err(|_| bad(line, "bad age"))?;
            let gender = Gender::from_code(&rec[5]).ok_or_else(|| bad(line, "bad gender"))?;
            let mut cbc = [None; 9];
            for (k, slot) in cbc.iter_mut().enumerate() {
                let s = &rec[6 + k];
                if !s.is_empty() {
                    *slot = Some(s.parse().map_err(|_| bad(line, "bad CBC value"))?);
                }
            }
            events.push(CbcEvent {
                event_id: rec[0].to_string(),
                patient_id: rec[1].to_string(),
                t,
                cbc,
                label,
                age_years,
                gender,
            });
        }
        Cohort::from_events(events, policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Patient;
    use crate::ingest::validate_dataset;
    use chrono::TimeZone;

    fn ts(d: u32, h: u32, m: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 1, 1, h, m, 0).unwrap() + Duration::days(d as i64 - 1)
    }

    fn lab(a: Analyte, v: f64, t: DateTime<Utc>) -> LabResult {
        LabResult {
            patient_id: "p1".into(),
            analyte: a,
            value: v,
            collected_at: t,
        }
    }

    fn dataset(results: Vec<LabResult>) -> Dataset {
        let p = Patient {
            patient_id: "p1".into(),
            gender: Gender::Female,
            birth_date: NaiveDate::from_ymd_opt(1980, 1, 1).unwrap(),
        };
        validate_dataset(vec![p], results).unwrap().0
    }

    fn window() -> StudyWindow {
        StudyWindow::new(
            NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(2021, 12, 31).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn any_cbc_parameter_makes_an_event() {
        let ds = dataset(vec![lab(Analyte::Mcv, 85.0, ts(50, 8, 0))]);
        let ev = extract_cbc_events(&ds, window());
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].cbc_value(Analyte::Mcv), Some(85.0));
        assert_eq!(ev[0].cbc_value(Analyte::Hematocrit), None);
    }

    #[test]
    fn ferritin_alone_is_not_an_event() {
        let ds = dataset(vec![lab(Analyte::Ferritin, 20.0, ts(50, 8, 0))]);
        assert!(extract_cbc_events(&ds, window()).is_empty());
    }

    #[test]
    fn separate_cbcs_are_separate_events() {
        let ds = dataset(vec![
            lab(Analyte::Hematocrit, 40.0, ts(10, 8, 0)),
            lab(Analyte::Hematocrit, 41.0, ts(200, 8, 0)),
        ]);
        let ev = extract_cbc_events(&ds, window());
        assert_eq!(ev.len(), 2);
        assert_ne!(ev[0].event_id, ev[1].event_id);
    }

    #[test]
    fn events_outside_window_are_skipped() {
        let early = Utc.with_ymd_and_hms(2020, 12, 31, 23, 0, 0).unwrap();
        let ds = dataset(vec![lab(Analyte::Hematocrit, 40.0, early)]);
        assert!(extract_cbc_events(&ds, window()).is_empty());
    }

    #[test]
    fn missing_parameter_backfilled_from_prior_30_days() {
        let ds = dataset(vec![
            lab(Analyte::Hematocrit, 39.0, ts(30, 8, 0)),
            lab(Analyte::Rdw, 13.0, ts(5, 8, 0)),
            lab(Analyte::Mcv, 88.0, ts(40, 8, 0)),
        ]);
        let ev = extract_cbc_events(&ds, window());
        let last = ev.last().unwrap();
        assert_eq!(last.t, ts(40, 8, 0));
        assert_eq!(last.cbc_value(Analyte::Hematocrit), Some(39.0));
        // 35 days earlier: outside the look-back
        assert_eq!(last.cbc_value(Analyte::Rdw), None);
    }

    fn event_at(t: DateTime<Utc>) -> CbcEvent {
        CbcEvent {
            event_id: "e".into(),
            patient_id: "p1".into(),
            t,
            cbc: [None; 9],
            label: false,
            age_years: 40.0,
            gender: Gender::Male,
        }
    }

    #[test]
    fn label_windows() {
        let t = ts(100, 9, 0);
        let e = event_at(t);
        let p = LabelPolicy::primary();
        let r = LabelPolicy::refined();
        let at = |x| vec![lab(Analyte::Ferritin, 15.0, x)];
        assert!(label_event(&e, &at(t + Duration::days(30)), &p));
        assert!(!label_event(
            &e,
            &at(t + Duration::days(30) + Duration::seconds(1)),
            &p
        ));
        assert!(label_event(&e, &at(t), &p));
        assert!(!label_event(&e, &at(t - Duration::minutes(2)), &p));
        assert!(label_event(&e, &at(t - Duration::minutes(2)), &r));
        assert!(!label_event(&e, &[], &p));
        assert!(!label_event(&e, &at(t - Duration::hours(2)), &p));
        assert!(!label_event(&e, &at(t - Duration::hours(2)), &r));
        // non-ferritin results never label
        assert!(!label_event(&e, &[lab(Analyte::Iron, 15.0, t)], &p));
    }

    #[test]
    fn cohort_stats_and_relabel() {
        let ds = dataset(vec![
            lab(Analyte::Hematocrit, 40.0, ts(10, 8, 0)),
            lab(Analyte::Hematocrit, 40.0, ts(60, 8, 0)),
            lab(Analyte::Ferritin, 40.0, ts(60, 7, 58)),
            lab(Analyte::Hematocrit, 40.0, ts(120, 8, 0)),
            lab(Analyte::Hematocrit, 40.0, ts(200, 8, 0)),
            lab(Analyte::Ferritin, 40.0, ts(205, 8, 0)),
        ]);
        let c = build_cohort(&ds, window(), LabelPolicy::primary()).unwrap();
        assert_eq!(c.stats.n_events, 4);
        assert_eq!(c.stats.n_positive, 1);
        assert_eq!(c.stats.positive_rate, 0.25);
        let r = c.relabel(&ds, LabelPolicy::refined()).unwrap();
        assert_eq!(r.stats.n_positive, 2);
        for (a, b) in c.events.iter().zip(&r.events) {
            assert!(b.label >= a.label);
        }
        assert_eq!(CohortStats::compute(&r.events), r.stats);
    }

    #[test]
    fn empty_cohort_is_an_error() {
        let ds = dataset(vec![lab(Analyte::Sodium, 140.0, ts(10, 8, 0))]);
        assert!(matches!(
            build_cohort(&ds, window(), LabelPolicy::primary()),
            Err(CohortError::EmptyCohort)
        ));
    }

    #[test]
    fn csv_round_trip() {
        let ds = dataset(vec![
            lab(Analyte::Hematocrit, 40.5, ts(10, 8, 0)),
            lab(Analyte::Mcv, 79.25, ts(10, 8, 0)),
            lab(Analyte::Ferritin, 9.0, ts(12, 8, 0)),
        ]);
        let c = build_cohort(&ds, window(), LabelPolicy::primary()).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = Cohort::read_csv(buf.as_slice(), LabelPolicy::primary()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn event_ids_are_stable() {
        let t = ts(10, 8, 0);
        assert_eq!(event_id("p1", t), event_id("p1", t));
        assert_ne!(event_id("p1", t), event_id("p2", t));
        assert_eq!(event_id("p1", t).len(), 16);
    }
}
