//! Parsing and validation of the `patients.csv` / `labs.csv` pair.
//!
//! Malformed rows are rejected and counted rather than aborting the load;
//! structural problems (bad header, duplicate patients, mismatched files)
//! are hard errors. `strict` mode turns the first rejection into an error.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::ops::Range;

use chrono::{DateTime, NaiveDate, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Analyte, Catalog, Gender, LabResult, Patient};

pub const PATIENTS_HEADER: [&str; 3] = ["patient_id", "gender", "birth_date"];
pub const LABS_HEADER: [&str; 4] = ["patient_id", "analyte", "value", "collected_at"];

/// Orphan results above this fraction indicate the wrong pair of files.
pub const MAX_ORPHAN_FRACTION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("expected header `{expected}`, found `{found}`")]
    BadHeader { expected: String, found: String },
    #[error("duplicate patient id `{0}`")]
    DuplicatePatient(String),
    #[error("row {line} rejected ({reason})")]
    RowRejected { line: u64, reason: RejectReason },
    #[error("{orphans} of {total} lab results reference unknown patients; wrong file pairing?")]
    DatasetMismatch { orphans: usize, total: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BadRow,
    EmptyPatientId,
    BadGender,
    BadDate,
    BadValue,
    BadTimestamp,
    UnknownAnalyte,
    OrphanResult,
    BeforeBirth,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::BadRow => "bad_row",
            RejectReason::EmptyPatientId => "empty_patient_id",
            RejectReason::BadGender => "bad_gender",
            RejectReason::BadDate => "bad_date",
            RejectReason::BadValue => "bad_value",
            RejectReason::BadTimestamp => "bad_timestamp",
            RejectReason::UnknownAnalyte => "unknown_analyte",
            RejectReason::OrphanResult => "orphan_result",
            RejectReason::BeforeBirth => "before_birth",
        }
    }
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: u64,
    pub rows_accepted: u64,
    pub rows_rejected: u64,
    pub rejection_reasons: BTreeMap<RejectReason, u64>,
}

impl IngestReport {
    fn accept(&mut self) {
        self.rows_read += 1;
        self.rows_accepted += 1;
    }

    fn reject(&mut self, reason: RejectReason) {
        self.rows_read += 1;
        self.rows_rejected += 1;
        *self.rejection_reasons.entry(reason).or_default() += 1;
    }

    pub fn count(&self, reason: RejectReason) -> u64 {
        self.rejection_reasons.get(&reason).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    pub strict: bool,
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<bool, IngestError> {
    let header = rdr.byte_headers()?.clone();
    if header.is_empty() {
        // empty stream
        return Ok(false);
    }
    let found: Vec<String> = header
        .iter()
        .map(|f| String::from_utf8_lossy(f).trim().to_string())
        .collect();
    if found != expected {
        return Err(IngestError::BadHeader {
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(true)
}

fn reader<R: Read>(stream: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(stream)
}

fn utf8_fields(rec: &csv::ByteRecord, n: usize) -> Option<Vec<&str>> {
    if rec.len() != n {
        return None;
    }
    rec.iter().map(|f| std::str::from_utf8(f).ok()).collect()
}

fn handle_reject(
    report: &mut IngestReport,
    reason: RejectReason,
    line: u64,
    opts: ParseOptions,
) -> Result<(), IngestError> {
    report.reject(reason);
    if opts.strict {
        return Err(IngestError::RowRejected { line, reason });
    }
    log::warn!("row {line} rejected: {reason}");
    Ok(())
}

/// Parses `patient_id,gender,birth_date` rows.
pub fn parse_patients<R: Read>(
    stream: R,
    opts: ParseOptions,
) -> Result<(Vec<Patient>, IngestReport), IngestError> {
    let mut rdr = reader(stream);
    let mut report = IngestReport::default();
    let mut patients = Vec::new();
    if !check_header(&mut rdr, &PATIENTS_HEADER)? {
        return Ok((patients, report));
    }
    let mut seen = HashMap::new();
    let mut rec = csv::ByteRecord::new();
    loop {
        match rdr.read_byte_record(&mut rec) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) if matches!(e.kind(), csv::ErrorKind::Utf8 { .. }) => {
                handle_reject(&mut report, RejectReason::BadRow, 0, opts)?;
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        let line = rec.position().map_or(0, |p| p.line());
        let Some(fields) = utf8_fields(&rec, 3) else {
            handle_reject(&mut report, RejectReason::BadRow, line, opts)?;
            continue;
        };
        let id = fields[0];
        if id.is_empty() {
            handle_reject(&mut report, RejectReason::EmptyPatientId, line, opts)?;
            continue;
        }
        let Some(gender) = Gender::from_code(fields[1]) else {
            handle_reject(&mut report, RejectReason::BadGender, line, opts)?;
            continue;
        };
        let Ok(birth_date) = NaiveDate::parse_from_str(fields[2], "%Y-%m-%d") else {
            handle_reject(&mut report, RejectReason::BadDate, line, opts)?;
            continue;
        };
        if seen.insert(id.to_string(), ()).is_some() {
            return Err(IngestError::DuplicatePatient(id.to_string()));
        }
        report.accept();
        patients.push(Patient {
            patient_id: id.to_string(),
            gender,
            birth_date,
        });
    }
    Ok((patients, report))
}

/// Parses `patient_id,analyte,value,collected_at` rows; output is sorted
/// stably by `(patient_id, collected_at)`.
pub fn parse_lab_results<R: Read>(
    stream: R,
    catalog: &Catalog,
    opts: ParseOptions,
) -> Result<(Vec<LabResult>, IngestReport), IngestError> {
    let mut rdr = reader(stream);
    let mut report = IngestReport::default();
    let mut results = Vec::new();
    if !check_header(&mut rdr, &LABS_HEADER)? {
        return Ok((results, report));
    }
    let mut rec = csv::ByteRecord::new();
    loop {
        match rdr.read_byte_record(&mut rec) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) if matches!(e.kind(), csv::ErrorKind::Utf8 { .. }) => {
                handle_reject(&mut report, RejectReason::BadRow, 0, opts)?;
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        let line = rec.position().map_or(0, |p| p.line());
        let Some(fields) = utf8_fields(&rec, 4) else {
            handle_reject(&mut report, RejectReason::BadRow, line, opts)?;
            continue;
        };
        if fields[0].is_empty() {
            handle_reject(&mut report, RejectReason::EmptyPatientId, line, opts)?;
            continue;
        }
        let Some(analyte) = catalog.lookup(fields[1]) else {
            handle_reject(&mut report, RejectReason::UnknownAnalyte, line, opts)?;
            continue;
        };
        let value = match fields[2].parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => {
                handle_reject(&mut report, RejectReason::BadValue, line, opts)?;
                continue;
            }
        };
        let Ok(ts) = DateTime::parse_from_rfc3339(fields[3]) else {
            handle_reject(&mut report, RejectReason::BadTimestamp, line, opts)?;
            continue;
        };
        report.accept();
        results.push(LabResult {
            patient_id: fields[0].to_string(),
            analyte,
            value,
            collected_at: ts.with_timezone(&Utc),
        });
    }
    sort_results(&mut results);
    Ok((results, report))
}

pub fn sort_results(results: &mut [LabResult]) {
    results.sort_by(|a, b| {
        a.patient_id
            .cmp(&b.patient_id)
            .then(a.collected_at.cmp(&b.collected_at))
    });
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<(String, u64)>,
}

/// Validated, immutable patients + results.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub patients: BTreeMap<String, Patient>,
    /// Sorted by `(patient_id, collected_at)`, ties in input order.
    pub results: Vec<LabResult>,
    pub provenance: Provenance,
    index: BTreeMap<String, Range<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub orphan_results: u64,
    pub results_before_birth: u64,
}

impl ValidationReport {
    pub fn warnings(&self) -> u64 {
        self.orphan_results + self.results_before_birth
    }
}

/// Drops orphan and pre-birth results, counting each as a warning.
pub fn validate_dataset(
    patients: Vec<Patient>,
    mut results: Vec<LabResult>,
) -> Result<(Dataset, ValidationReport), IngestError> {
    let mut map = BTreeMap::new();
    for p in patients {
        if map.contains_key(&p.patient_id) {
            return Err(IngestError::DuplicatePatient(p.patient_id));
        }
        map.insert(p.patient_id.clone(), p);
    }
    let total = results.len();
    let mut report = ValidationReport::default();
    results.retain(|r| match map.get(&r.patient_id) {
        None => {
            report.orphan_results += 1;
            false
        }
        Some(p) => {
            let birth = p
                .birth_date
                .and_hms_opt(0, 0, 0)
                .expect("midnight")
                .and_utc();
            if r.collected_at < birth {
                report.results_before_birth += 1;
                false
            } else {
                true
            }
        }
    });
    if total > 0 && report.orphan_results as f64 > MAX_ORPHAN_FRACTION * total as f64 {
        return Err(IngestError::DatasetMismatch {
            orphans: report.orphan_results as usize,
            total,
        });
    }
    if report.orphan_results > 0 {
        log::warn!("{} orphan lab results dropped", report.orphan_results);
    }
    if report.results_before_birth > 0 {
        log::warn!(
            "{} lab results dated before birth dropped",
            report.results_before_birth
        );
    }
    sort_results(&mut results);
    Ok((Dataset::from_sorted(map, results), report))
}

impl Dataset {
    fn from_sorted(patients: BTreeMap<String, Patient>, results: Vec<LabResult>) -> Self {
        let mut index = BTreeMap::new();
        let mut start = 0;
        for i in 1..=results.len() {
            if i == results.len() || results[i].patient_id != results[start].patient_id {
                index.insert(results[start].patient_id.clone(), start..i);
                start = i;
            }
        }
        Dataset {
            provenance: Provenance::default(),
            patients,
            results,
            index,
        }
    }

    /// Results without patient records, for stages that only read history.
    pub fn from_results(mut results: Vec<LabResult>) -> Self {
        sort_results(&mut results);
        Dataset::from_sorted(BTreeMap::new(), results)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// All results of one patient, in time order.
    pub fn patient_results(&self, patient_id: &str) -> &[LabResult] {
        self.index
            .get(patient_id)
            .map_or(&[], |r| &self.results[r.clone()])
    }

    pub fn patient(&self, patient_id: &str) -> Option<&Patient> {
        self.patients.get(patient_id)
    }

    /// Loads and validates the two files in one step.
    pub fn load<P: Read, L: Read>(
        patients: P,
        labs: L,
        catalog: &Catalog,
        opts: ParseOptions,
    ) -> Result<(Dataset, LoadReport), IngestError> {
        let (patients, patient_report) = parse_patients(patients, opts)?;
        let (results, lab_report) = parse_lab_results(labs, catalog, opts)?;
        let provenance = Provenance {
            sources: vec![
                ("patients".to_string(), patient_report.rows_read),
                ("labs".to_string(), lab_report.rows_read),
            ],
        };
        let (dataset, validation) = validate_dataset(patients, results)?;
        Ok((
            dataset.with_provenance(provenance),
            LoadReport {
                patients: patient_report,
                labs: lab_report,
                validation,
            },
        ))
    }

    pub fn write_patients_csv<W: Write>(&self, out: W) -> Result<(), IngestError> {
        write_patients_csv(self.patients.values(), out)
    }

    pub fn write_labs_csv<W: Write>(&self, out: W) -> Result<(), IngestError> {
        write_labs_csv(&self.results, out)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub patients: IngestReport,
    pub labs: IngestReport,
    pub validation: ValidationReport,
}

pub fn write_patients_csv<'a, W: Write>(
    patients: impl IntoIterator<Item = &'a Patient>,
    out: W,
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PATIENTS_HEADER)?;
    for p in patients {
        w.write_record([
            p.patient_id.as_str(),
            p.gender.code(),
            &p.birth_date.format("%Y-%m-%d").to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn write_labs_csv<W: Write>(results: &[LabResult], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LABS_HEADER)?;
    for r in results {
        w.write_record([
            r.patient_id.as_str(),
            r.analyte.code(),
            &r.value.to_string(),
            &format_timestamp(r.collected_at),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Analyte codes accepted by default, for error messages and `--help`.
pub fn catalog_codes() -> Vec<&'static str> {
    Analyte::ALL.iter().map(|a| a.code()).collect()
}
