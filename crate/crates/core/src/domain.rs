//! Shared domain types: patients, lab results, the analyte catalog and
//! gender-specific reference limits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("no reference range configured for {analyte} ({gender})")]
    NoRangeConfigured { analyte: Analyte, gender: Gender },
    #[error("timestamp {at} precedes birth date {birth}")]
    InvalidChronology { birth: NaiveDate, at: DateTime<Utc> },
    #[error("invalid reference range: {0}")]
    InvalidRange(String),
    #[error("unknown analyte code `{0}`")]
    UnknownAnalyte(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn code(self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }

    pub fn from_code(s: &str) -> Option<Gender> {
        match s {
            "M" => Some(Gender::Male),
            "F" => Some(Gender::Female),
            _ => None,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: String,
    pub gender: Gender,
    pub birth_date: NaiveDate,
}

impl Patient {
    /// Age in fractional years (days / 365.25) at `at`.
    pub fn age_at(&self, at: DateTime<Utc>) -> Result<f64, DomainError> {
        age_at(self.birth_date, at)
    }
}

pub fn age_at(birth_date: NaiveDate, at: DateTime<Utc>) -> Result<f64, DomainError> {
    let birth = birth_date.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
    if at < birth {
        return Err(DomainError::InvalidChronology {
            birth: birth_date,
            at,
        });
    }
    let secs = (at - birth).num_seconds() as f64;
    Ok(secs / 86_400.0 / 365.25)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabResult {
    pub patient_id: String,
    pub analyte: Analyte,
    pub value: f64,
    pub collected_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnalyteGroup {
    Ferritin,
    Cbc,
    RoutineChemistry,
    Coagulation,
    Hematology,
    IronStudies,
    Lipids,
    Other,
}

macro_rules! analytes {
    ($( $variant:ident => ($code:literal, $name:literal, $unit:literal, $group:ident) ),+ $(,)?) => {
        /// Every analyte used as a predictor or target.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum Analyte {
            $($variant),+
        }

        impl Analyte {
            pub const ALL: &'static [Analyte] = &[$(Analyte::$variant),+];

            pub fn code(self) -> &'static str {
                match self { $(Analyte::$variant => $code),+ }
            }

            pub fn name(self) -> &'static str {
                match self { $(Analyte::$variant => $name),+ }
            }

            /// Canonical unit; values are always stored in this unit.
            pub fn unit(self) -> &'static str {
                match self { $(Analyte::$variant => $unit),+ }
            }

            pub fn group(self) -> AnalyteGroup {
                match self { $(Analyte::$variant => AnalyteGroup::$group),+ }
            }

            pub fn from_code(code: &str) -> Option<Analyte> {
                match code {
                    $($code => Some(Analyte::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

analytes! {
    Ferritin => ("FERR", "Ferritin", "lab units", Ferritin),

    Hemoglobin => ("HGB", "Hemoglobin", "g/dL", Cbc),
    Hematocrit => ("HCT", "Hematocrit", "%", Cbc),
    Platelets => ("PLT", "Platelet count", "10^3/uL", Cbc),
    Mcv => ("MCV", "Mean cell volume", "fL", Cbc),
    Mch => ("MCH", "Mean cell hemoglobin", "pg", Cbc),
    Mchc => ("MCHC", "Mean cell hemoglobin concentration", "g/dL", Cbc),
    Rdw => ("RDW", "Red cell distribution width", "%", Cbc),
    Rbc => ("RBC", "Red blood cell count", "10^6/uL", Cbc),
    Wbc => ("WBC", "White blood cell count", "10^3/uL", Cbc),

    Alt => ("ALT", "Alanine transaminase", "U/L", RoutineChemistry),
    Albumin => ("ALB", "Albumin", "g/dL", RoutineChemistry),
    AlkPhos => ("ALP", "Alkaline phosphatase", "U/L", RoutineChemistry),
    AnionGap => ("AGAP", "Anion gap", "mmol/L", RoutineChemistry),
    Ast => ("AST", "Aspartate transaminase", "U/L", RoutineChemistry),
    Bicarbonate => ("HCO3", "Bicarbonate", "mmol/L", RoutineChemistry),
    Bun => ("BUN", "Blood urea nitrogen", "mg/dL", RoutineChemistry),
    Calcium => ("CA", "Calcium", "mg/dL", RoutineChemistry),
    Chloride => ("CL", "Chloride", "mmol/L", RoutineChemistry),
    Creatinine => ("CREAT", "Creatinine", "mg/dL", RoutineChemistry),
    Globulin => ("GLOB", "Globulin", "g/dL", RoutineChemistry),
    Glucose => ("GLU", "Glucose", "mg/dL", RoutineChemistry),
    Magnesium => ("MG", "Magnesium", "mg/dL", RoutineChemistry),
    Phosphorus => ("PHOS", "Phosphorus", "mg/dL", RoutineChemistry),
    Potassium => ("K", "Potassium", "mmol/L", RoutineChemistry),
    Sodium => ("NA", "Sodium", "mmol/L", RoutineChemistry),
    TotalBilirubin => ("TBILI", "Total bilirubin", "mg/dL", RoutineChemistry),
    TotalProtein => ("TP", "Total protein", "g/dL", RoutineChemistry),

    Aptt => ("APTT", "aPTT", "s", Coagulation),
    DDimer => ("DDIMER", "D-dimer", "ng/mL", Coagulation),
    Inr => ("INR", "INR", "ratio", Coagulation),
    Pt => ("PT", "Prothrombin time", "s", Coagulation),

    AbsBasophils => ("ABASO", "Absolute basophil count", "10^3/uL", Hematology),
    AbsEosinophils => ("AEOS", "Absolute eosinophil count", "10^3/uL", Hematology),
    AbsLymphocytes => ("ALYMPH", "Absolute lymphocyte count", "10^3/uL", Hematology),
    AbsMonocytes => ("AMONO", "Absolute monocyte count", "10^3/uL", Hematology),
    AbsNeutrophils => ("ANEUT", "Absolute neutrophil count", "10^3/uL", Hematology),
    Bands => ("BANDS", "Bands", "%", Hematology),
    Metamyelocytes => ("METAS", "Metamyelocytes", "%", Hematology),
    Myelocytes => ("MYELOS", "Myelocytes", "%", Hematology),
    PctBasophils => ("PBASO", "Percent basophils", "%", Hematology),
    PctEosinophils => ("PEOS", "Percent eosinophils", "%", Hematology),
    PctLymphocytes => ("PLYMPH", "Percent lymphocytes", "%", Hematology),
    PctMonocytes => ("PMONO", "Percent monocytes", "%", Hematology),
    PctNeutrophils => ("PNEUT", "Percent neutrophils", "%", Hematology),
    PctNucleatedRbc => ("PNRBC", "Percent nucleated RBCs", "%", Hematology),
    ReactiveLymphs => ("RLYMPH", "Reactive lymphocytes", "%", Hematology),
    Reticulocytes => ("RETIC", "Reticulocytes", "%", Hematology),
    Schistocytes => ("SCHIS", "Schistocytes", "/hpf", Hematology),

    Iron => ("IRON", "Iron", "ug/dL", IronStudies),
    Tibc => ("TIBC", "Total iron-binding capacity", "ug/dL", IronStudies),

    Cholesterol => ("CHOL", "Cholesterol", "mg/dL", Lipids),
    Hdl => ("HDL", "HDL", "mg/dL", Lipids),
    Ldl => ("LDL", "LDL", "mg/dL", Lipids),
    Triglycerides => ("TRIG", "Triglycerides", "mg/dL", Lipids),

    Amylase => ("AMY", "Amylase", "U/L", Other),
    B12 => ("B12", "Vitamin B12", "pg/mL", Other),
    Crp => ("CRP", "C-reactive protein", "mg/L", Other),
    Cea => ("CEA", "Carcinoembryonic antigen", "ng/mL", Other),
    CreatineKinase => ("CK", "Creatine kinase", "U/L", Other),
    DirectBilirubin => ("DBILI", "Direct bilirubin", "mg/dL", Other),
    Esr => ("ESR", "Erythrocyte sedimentation rate", "mm/h", Other),
    FolicAcid => ("FOLATE", "Folic acid", "ng/mL", Other),
    FreeT4 => ("FT4", "Free T4", "ng/dL", Other),
    Ldh => ("LDH", "Lactate dehydrogenase", "U/L", Other),
    Lipase => ("LIPASE", "Lipase", "U/L", Other),
    NtProBnp => ("NTBNP", "NT-ProBNP", "pg/mL", Other),
    Osmolality => ("OSMO", "Osmolality", "mOsm/kg", Other),
    Pth => ("PTH", "Parathyroid hormone", "pg/mL", Other),
    LacticAcid => ("LACT", "Lactic acid", "mmol/L", Other),
    Psa => ("PSA", "Prostate-specific antigen", "ng/mL", Other),
    Testosterone => ("TESTO", "Testosterone", "ng/dL", Other),
    // 4th generation only; 5th generation results are not part of the catalog.
    TroponinT => ("TNT4", "Troponin T (4th generation)", "ng/mL", Other),
    Tsh => ("TSH", "Thyroid stimulating hormone", "mIU/L", Other),
    UricAcid => ("URIC", "Uric acid", "mg/dL", Other),
    UrineProtein => ("UTP", "Urine total protein", "mg/dL", Other),
    VitaminD => ("VITD", "Vitamin D", "ng/mL", Other),
}

/// The nine CBC parameters, in the fixed column order used everywhere.
pub const CBC_ANALYTES: [Analyte; 9] = [
    Analyte::Hemoglobin,
    Analyte::Hematocrit,
    Analyte::Platelets,
    Analyte::Mcv,
    Analyte::Mch,
    Analyte::Mchc,
    Analyte::Rdw,
    Analyte::Rbc,
    Analyte::Wbc,
];

impl Analyte {
    pub fn is_cbc(self) -> bool {
        self.group() == AnalyteGroup::Cbc
    }

    /// Position within [`CBC_ANALYTES`], if this is a CBC parameter.
    pub fn cbc_index(self) -> Option<usize> {
        CBC_ANALYTES.iter().position(|&a| a == self)
    }
}

impl fmt::Display for Analyte {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Analyte {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Analyte::from_code(s).ok_or_else(|| DomainError::UnknownAnalyte(s.to_string()))
    }
}

/// Set of analytes accepted at ingestion.
#[derive(Debug, Clone)]
pub struct Catalog {
    accepted: Vec<bool>,
}

impl Default for Catalog {
    fn default() -> Self {
        Catalog {
            accepted: vec![true; Analyte::ALL.len()],
        }
    }
}

impl Catalog {
    pub fn only(analytes: &[Analyte]) -> Self {
        let mut accepted = vec![false; Analyte::ALL.len()];
        for &a in analytes {
            accepted[a as usize] = true;
        }
        Catalog { accepted }
    }

    pub fn lookup(&self, code: &str) -> Option<Analyte> {
        Analyte::from_code(code).filter(|&a| self.accepted[a as usize])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RangeGender {
    Male,
    Female,
    Any,
}

impl RangeGender {
    fn matches(self, g: Gender) -> bool {
        matches!(
            (self, g),
            (RangeGender::Any, _)
                | (RangeGender::Male, Gender::Male)
                | (RangeGender::Female, Gender::Female)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRange {
    pub analyte: Analyte,
    pub gender: RangeGender,
    pub low: Option<f64>,
    pub high: Option<f64>,
}

impl ReferenceRange {
    pub fn new(
        analyte: Analyte,
        gender: RangeGender,
        low: Option<f64>,
        high: Option<f64>,
    ) -> Result<Self, DomainError> {
        if let (Some(l), Some(h)) = (low, high) {
            if !(l < h) {
                return Err(DomainError::InvalidRange(format!(
                    "{analyte}: low {l} must be below high {h}"
                )));
            }
        }
        if low.is_none() && high.is_none() {
            return Err(DomainError::InvalidRange(format!(
                "{analyte}: at least one limit required"
            )));
        }
        Ok(ReferenceRange {
            analyte,
            gender,
            low,
            high,
        })
    }

    pub fn is_below(&self, value: f64) -> Option<bool> {
        self.low.map(|l| value < l)
    }

    pub fn is_above(&self, value: f64) -> Option<bool> {
        self.high.map(|h| value > h)
    }
}

/// Adult reference limits, resolved by gender. Ages are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRanges {
    ranges: BTreeMap<Analyte, Vec<ReferenceRange>>,
}

impl Default for ReferenceRanges {
    fn default() -> Self {
        let defaults = [
            (Analyte::Hematocrit, RangeGender::Male, Some(41.0), None),
            (Analyte::Hematocrit, RangeGender::Female, Some(36.0), None),
            (Analyte::Mcv, RangeGender::Any, Some(80.0), None),
            (Analyte::Rdw, RangeGender::Any, None, Some(14.5)),
            (Analyte::Ferritin, RangeGender::Male, Some(30.0), None),
            (Analyte::Ferritin, RangeGender::Female, Some(10.0), None),
        ];
        let mut out = ReferenceRanges {
            ranges: BTreeMap::new(),
        };
        for (a, g, lo, hi) in defaults {
            out.set(ReferenceRange::new(a, g, lo, hi).expect("valid default"));
        }
        out
    }
}

impl ReferenceRanges {
    /// Inserts or replaces the range for `(analyte, gender)`.
    pub fn set(&mut self, range: ReferenceRange) {
        let entry = self.ranges.entry(range.analyte).or_default();
        entry.retain(|r| r.gender != range.gender);
        entry.push(range);
        entry.sort_by_key(|r| r.gender);
    }

    pub fn reference_limit(
        &self,
        analyte: Analyte,
        gender: Gender,
    ) -> Result<ReferenceRange, DomainError> {
        let candidates = self
            .ranges
            .get(&analyte)
            .ok_or(DomainError::NoRangeConfigured { analyte, gender })?;
        // gender-specific entries win over `Any`
        candidates
            .iter()
            .find(|r| r.gender != RangeGender::Any && r.gender.matches(gender))
            .or_else(|| candidates.iter().find(|r| r.gender == RangeGender::Any))
            .copied()
            .ok_or(DomainError::NoRangeConfigured { analyte, gender })
    }

    /// Defaults overridden by a `analyte,gender,low,high` CSV (gender in M/F/any,
    /// empty limit = none).
    pub fn with_overrides<R: Read>(mut self, reader: R) -> Result<Self, DomainError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| DomainError::InvalidRange(e.to_string()))?;
            let bad = |what: &str| DomainError::InvalidRange(format!("row {}: {what}", i + 2));
            if rec.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let analyte: Analyte = rec[0].parse()?;
            let gender = match rec[1].to_ascii_lowercase().as_str() {
                "m" | "male" => RangeGender::Male,
                "f" | "female" => RangeGender::Female,
                "any" | "" => RangeGender::Any,
                _ => return Err(bad("gender must be M, F or any")),
            };
            let limit = |s: &str| -> Result<Option<f64>, DomainError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .map(Some)
                        .ok_or_else(|| bad("limit is not a finite number"))
                }
            };
            self.set(ReferenceRange::new(
                analyte,
                gender,
                limit(&rec[2])?,
                limit(&rec[3])?,
            )?);
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn catalog_matches_analyte_table() {
        let cbc: Vec<_> = Analyte::ALL
            .iter()
            .filter(|a| a.is_cbc())
            .copied()
            .collect();
        assert_eq!(cbc, CBC_ANALYTES.to_vec());
        let count = |g| Analyte::ALL.iter().filter(|a| a.group() == g).count();
        assert_eq!(count(AnalyteGroup::Ferritin), 1);
        assert_eq!(count(AnalyteGroup::RoutineChemistry), 18);
        assert_eq!(count(AnalyteGroup::Coagulation), 4);
        assert_eq!(count(AnalyteGroup::Hematology), 17);
        assert_eq!(count(AnalyteGroup::IronStudies), 2);
        assert_eq!(count(AnalyteGroup::Lipids), 4);
        assert_eq!(count(AnalyteGroup::Other), 22);
        for a in Analyte::ALL {
            assert_eq!(Analyte::from_code(a.code()), Some(*a));
        }
        assert_eq!(Analyte::from_code("TROP5"), None);
    }

    #[test]
    fn reference_limits_from_rule_table() {
        let r = ReferenceRanges::default();
        assert_eq!(
            r.reference_limit(Analyte::Hematocrit, Gender::Male)
                .unwrap()
                .low,
            Some(41.0)
        );
        assert_eq!(
            r.reference_limit(Analyte::Hematocrit, Gender::Female)
                .unwrap()
                .low,
            Some(36.0)
        );
        assert_eq!(
            r.reference_limit(Analyte::Mcv, Gender::Female).unwrap().low,
            Some(80.0)
        );
        let m = r.reference_limit(Analyte::Rdw, Gender::Male).unwrap();
        let f = r.reference_limit(Analyte::Rdw, Gender::Female).unwrap();
        assert_eq!(m, f);
        assert_eq!(m.high, Some(14.5));
        assert_eq!(
            r.reference_limit(Analyte::Ferritin, Gender::Female)
                .unwrap()
                .low,
            Some(10.0)
        );
        assert_eq!(
            r.reference_limit(Analyte::Ferritin, Gender::Male)
                .unwrap()
                .low,
            Some(30.0)
        );
        assert!(matches!(
            r.reference_limit(Analyte::Sodium, Gender::Male),
            Err(DomainError::NoRangeConfigured { .. })
        ));
    }

    #[test]
    fn reference_limits_total_over_rule_analytes() {
        let r = ReferenceRanges::default();
        for a in [
            Analyte::Hematocrit,
            Analyte::Mcv,
            Analyte::Rdw,
            Analyte::Ferritin,
        ] {
            for g in [Gender::Male, Gender::Female] {
                assert!(r.reference_limit(a, g).is_ok());
            }
        }
    }

    #[test]
    fn ranges_file_overrides_defaults() {
        let csv = "analyte,gender,low,high\nHCT,M,40,\nNA,any,135,145\n";
        let r = ReferenceRanges::default()
            .with_overrides(csv.as_bytes())
            .unwrap();
        assert_eq!(
            r.reference_limit(Analyte::Hematocrit, Gender::Male)
                .unwrap()
                .low,
            Some(40.0)
        );
        assert_eq!(
            r.reference_limit(Analyte::Hematocrit, Gender::Female)
                .unwrap()
                .low,
            Some(36.0)
        );
        assert_eq!(
            r.reference_limit(Analyte::Sodium, Gender::Female)
                .unwrap()
                .high,
            Some(145.0)
        );
        let bad = "analyte,gender,low,high\nHCT,M,50,40\n";
        assert!(ReferenceRanges::default()
            .with_overrides(bad.as_bytes())
            .is_err());
    }

    #[test]
    fn age_in_years() {
        let birth = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
        let at = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        assert!((age_at(birth, at).unwrap() - 20.0).abs() < 0.01);
        let same = Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap();
        assert_eq!(age_at(birth, same).unwrap(), 0.0);
        let half = Utc.with_ymd_and_hms(2000, 7, 2, 0, 0, 0).unwrap();
        assert!((age_at(birth, half).unwrap() - 183.0 / 365.25).abs() < 1e-12);
        let before = Utc.with_ymd_and_hms(1999, 12, 31, 0, 0, 0).unwrap();
        assert!(matches!(
            age_at(birth, before),
            Err(DomainError::InvalidChronology { .. })
        ));
    }

    #[test]
    fn age_monotone() {
        let birth = NaiveDate::from_ymd_opt(1970, 3, 9).unwrap();
        let mut prev = 0.0;
        for d in 0..2000 {
            let at =
                Utc.with_ymd_and_hms(1970, 3, 9, 0, 0, 0).unwrap() + chrono::Duration::days(d * 11);
            let a = age_at(birth, at).unwrap();
            assert!(a >= prev);
            prev = a;
        }
    }
}
