//! Synthetic patients, lab histories and clinician ferritin orders with a
//! known ordering model.
//!
//! Each patient has a latent iron-deficiency state that lowers HCT and MCV,
//! raises RDW and lowers ferritin. The clinician orders ferritin for a CBC
//! with probability `sigmoid(b0 + f(CBC, prior ferritin, age))`, where every
//! input of `f` is recoverable from the emitted files, and `b0` is solved so
//! the mean ordering probability hits the configured base rate.

use std::io::Write;

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Utc};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{event_id, StudyWindow};
use crate::domain::{age_at, Analyte, Gender, LabResult, Patient, CBC_ANALYTES};
use crate::featurize::{resolve_window, AnchorMode};
use crate::ingest::{write_labs_csv, write_patients_csv, IngestError};
use crate::learn::{sigmoid, substream};
use crate::metrics::roc_curve;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(
        "cannot reach base rate {target}: mean ordering probability spans [{low:.4}, {high:.4}]"
    )]
    CalibrationFailure { target: f64, low: f64, high: f64 },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Coefficients of the true ordering model on CBC z-scores (hinged at 0),
/// the prior-ferritin indicator and age in years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrderingCoefficients {
    /// Applied to `max(-z_HCT, 0)`.
    pub low_hct: f64,
    /// Applied to `max(-z_MCV, 0)`.
    pub low_mcv: f64,
    /// Applied to `max(z_RDW, 0)`.
    pub high_rdw: f64,
    /// Any ferritin in the event's feature window.
    pub prior_ferritin: f64,
    /// Applied to `age - 50`.
    pub age: f64,
}

impl Default for OrderingCoefficients {
    fn default() -> Self {
        OrderingCoefficients {
            low_hct: 0.9,
            low_mcv: 0.9,
            high_rdw: 0.6,
            prior_ferritin: 1.6,
            age: -0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub study_start: NaiveDate,
    pub study_end: NaiveDate,
    /// Years of pre-study history visits.
    pub history_years: u32,
    pub mean_history_visits: f64,
    /// Events per patient are `1 + Poisson(mean_extra_events)`, capped.
    pub mean_extra_events: f64,
    pub max_events: usize,
    /// Target mean ordering probability.
    pub base_rate: f64,
    pub coefficients: OrderingCoefficients,
    pub iron_deficiency_prevalence: f64,
    /// Scales how far deficiency lowers ferritin; 0 makes ferritin
    /// independent of iron status.
    pub mnar_strength: f64,
    /// Ferritin values drawn from an independent iron state, so abnormality
    /// is unrelated to ordering.
    pub mcar_mode: bool,
    /// Fraction of orders whose ferritin is collected 1 to 3 minutes before
    /// the CBC. The default moves about 0.2% of all events under the
    /// refined label policy.
    pub pre_cbc_fraction: f64,
    /// Fraction of the remaining orders collected with the CBC itself.
    pub same_draw_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 50_000,
            study_start: NaiveDate::from_ymd_opt(2021, 1, 1).expect("valid date"),
            study_end: NaiveDate::from_ymd_opt(2021, 12, 31).expect("valid date"),
            history_years: 3,
            mean_history_visits: 2.5,
            mean_extra_events: 1.0,
            max_events: 8,
            base_rate: 0.122,
            coefficients: OrderingCoefficients::default(),
            iron_deficiency_prevalence: 0.15,
            mnar_strength: 1.0,
            mcar_mode: false,
            pre_cbc_fraction: 0.017,
            same_draw_fraction: 0.6,
            seed: 20_211_231,
        }
    }
}

const EVENT_SLOT_DAYS: i64 = 45;
const EVENT_JITTER_DAYS: i64 = 10;
pub const CALIBRATION_TOLERANCE: f64 = 0.002;

impl SynthConfig {
    /// Reads a config of `key = value` lines; missing keys take defaults.
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let cfg: SynthConfig =
            toml::from_str(text).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.n_patients == 0 {
            return bad("n_patients must be positive");
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return bad("base_rate must be in (0, 1)");
        }
        if !prob(self.iron_deficiency_prevalence)
            || !prob(self.pre_cbc_fraction)
            || !prob(self.same_draw_fraction)
        {
            return bad("rates must be in [0, 1]");
        }
        let c = self.coefficients;
        if ![
            c.low_hct,
            c.low_mcv,
            c.high_rdw,
            c.prior_ferritin,
            c.age,
            self.mnar_strength,
        ]
        .iter()
        .all(|v| v.is_finite())
        {
            return bad("coefficients must be finite");
        }
        if !(self.mean_history_visits >= 0.0 && self.mean_history_visits.is_finite())
            || !(self.mean_extra_events >= 0.0 && self.mean_extra_events.is_finite())
        {
            return bad("visit and event means must be non-negative");
        }
        if self.max_events == 0 {
            return bad("max_events must be positive");
        }
        if self.study_end < self.study_start {
            return bad("study_end before study_start");
        }
        let days = (self.study_end - self.study_start).num_days() + 1;
        if (self.max_events as i64) * EVENT_SLOT_DAYS > days {
            return bad("study window too short for max_events 45-day slots");
        }
        Ok(())
    }

    pub fn study_window(&self) -> StudyWindow {
        StudyWindow {
            start: self.study_start,
            end: self.study_end,
        }
    }
}

/// Per-patient latent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientLatent {
    pub patient_id: String,
    pub iron_deficient: bool,
    /// Deficiency severity in `[0.5, 1.5]`; 0 when not deficient.
    pub severity: f64,
    /// Patient-level offsets of the HCT, MCV and RDW z-scores.
    pub offsets: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTruth {
    pub event_id: String,
    pub patient_id: String,
    pub t: DateTime<Utc>,
    pub true_prob: f64,
    pub iron_deficient: bool,
    pub ordered: bool,
    /// The order's ferritin was collected just before the CBC.
    pub pre_cbc_ferritin: bool,
}

impl EventTruth {
    /// Label under the primary policy: the pre-CBC ferritin falls outside
    /// `[t, t + 30 days]`.
    pub fn primary_label(&self) -> bool {
        self.ordered && !self.pre_cbc_ferritin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthMeta {
    pub n_patients: usize,
    pub n_events: usize,
    pub n_results: usize,
    pub intercept: f64,
    pub mean_true_prob: f64,
    pub observed_order_rate: f64,
    pub n_pre_cbc_ferritin: usize,
    /// auROC of the true probabilities against the primary labels.
    pub bayes_auc: f64,
    pub config: SynthConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Sorted by `(patient_id, t)`, like cohort events.
    pub events: Vec<EventTruth>,
    pub patients: Vec<PatientLatent>,
    pub meta: TruthMeta,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub patients: Vec<Patient>,
    /// Sorted by `(patient_id, collected_at, analyte)`.
    pub results: Vec<LabResult>,
    pub truth: GroundTruth,
}

/// auROC of true probabilities against realized labels.
pub fn bayes_auc(probs: &[f64], labels: &[bool]) -> Result<f64, crate::metrics::MetricError> {
    Ok(roc_curve(probs, labels)?.area)
}

struct EventDraw {
    t: DateTime<Utc>,
    results: Vec<LabResult>,
    /// Ordering log-odds without intercept and prior-ferritin term.
    partial: f64,
    u_order: f64,
    pre_cbc: bool,
    ferritin_at: DateTime<Utc>,
    ferritin_value: f64,
    ferritin_window: (DateTime<Utc>, DateTime<Utc>),
}

struct PatientDraw {
    patient: Patient,
    latent: PatientLatent,
    history: Vec<LabResult>,
    history_ferritin: Vec<DateTime<Utc>>,
    events: Vec<EventDraw>,
}

struct Sim {
    probs: Vec<f64>,
    ordered: Vec<bool>,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn at_minute(day: NaiveDate, minute_of_day: u32) -> DateTime<Utc> {
    Utc.from_utc_datetime(
        &day.and_hms_opt(minute_of_day / 60, minute_of_day % 60, 0)
            .expect("valid time"),
    )
}

fn clinic_time(rng: &mut impl Rng, day: NaiveDate) -> DateTime<Utc> {
    at_minute(day, rng.gen_range(7 * 60..18 * 60))
}

fn hct_mean(g: Gender) -> f64 {
    match g {
        Gender::Male => 45.0,
        Gender::Female => 40.0,
    }
}

const HCT_SD: f64 = 3.5;
const MCV_MEAN: f64 = 90.0;
const MCV_SD: f64 = 5.0;
const RDW_MEAN: f64 = 13.2;
const RDW_SD: f64 = 1.0;

fn std_normal(rng: &mut impl Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

/// Nine CBC values in [`CBC_ANALYTES`] order, plus the emitted z-scores of
/// HCT, MCV and RDW.
fn draw_cbc(rng: &mut impl Rng, gender: Gender, latent: &PatientLatent) -> ([f64; 9], [f64; 3]) {
    let s = latent.severity;
    let z_hct = latent.offsets[0] - 1.2 * s + 0.5 * std_normal(rng);
    let z_mcv = latent.offsets[1] - 1.5 * s + 0.5 * std_normal(rng);
    let z_rdw = latent.offsets[2] + 1.5 * s + 0.5 * std_normal(rng);
    let hct = round1((hct_mean(gender) + HCT_SD * z_hct).clamp(15.0, 65.0));
    let mcv = round1((MCV_MEAN + MCV_SD * z_mcv).clamp(55.0, 120.0));
    let rdw = round1((RDW_MEAN + RDW_SD * z_rdw).clamp(10.5, 25.0));
    let hgb = round1(hct / 3.0 + 0.2 * std_normal(rng) - 0.3 * s);
    let rbc = round2(hct / mcv * 10.0 * (1.0 + 0.02 * std_normal(rng)));
    let mch = round1(hgb / rbc * 10.0);
    let mchc = round1(hgb / hct * 100.0);
    let plt = (250.0 + 40.0 * s + 50.0 * std_normal(rng))
        .clamp(20.0, 900.0)
        .round();
    let wbc = round1((7.0 * (0.25 * std_normal(rng)).exp()).clamp(1.0, 40.0));
    let mut out = [0.0; 9];
    for (k, a) in CBC_ANALYTES.iter().enumerate() {
        out[k] = match a {
            Analyte::Hemoglobin => hgb,
            Analyte::Hematocrit => hct,
            Analyte::Platelets => plt,
            Analyte::Mcv => mcv,
            Analyte::Mch => mch,
            Analyte::Mchc => mchc,
            Analyte::Rdw => rdw,
            Analyte::Rbc => rbc,
            Analyte::Wbc => wbc,
            _ => unreachable!("CBC analyte"),
        };
    }
    let z = [
        (hct - hct_mean(gender)) / HCT_SD,
        (mcv - MCV_MEAN) / MCV_SD,
        (rdw - RDW_MEAN) / RDW_SD,
    ];
    (out, z)
}

fn chemistry(rng: &mut impl Rng) -> Vec<(Analyte, f64)> {
    let mut n = |m: f64, sd: f64| m + sd * std_normal(rng);
    let na = round1(n(140.0, 2.5));
    let cl = round1(n(103.0, 2.5));
    let hco3 = round1(n(25.0, 2.0));
    vec![
        (Analyte::Sodium, na),
        (Analyte::Potassium, round1(n(4.2, 0.35))),
        (Analyte::Chloride, cl),
        (Analyte::Bicarbonate, hco3),
        (Analyte::AnionGap, round1(na - cl - hco3)),
        (Analyte::Bun, round1(n(15.0, 4.0).max(2.0))),
        (Analyte::Creatinine, round2(n(0.9, 0.2).max(0.3))),
        (Analyte::Glucose, round1(n(95.0, 15.0).max(40.0))),
        (Analyte::Calcium, round1(n(9.4, 0.4))),
    ]
}

fn ferritin_value(
    rng: &mut impl Rng,
    cfg: &SynthConfig,
    gender: Gender,
    latent: &PatientLatent,
) -> f64 {
    let (deficient, severity) = if cfg.mcar_mode {
        let d = rng.gen_bool(cfg.iron_deficiency_prevalence);
        (d, if d { rng.gen_range(0.5..1.5) } else { 0.0 })
    } else {
        (latent.iron_deficient, latent.severity)
    };
    let base: f64 = match gender {
        Gender::Male => 120.0,
        Gender::Female => 60.0,
    };
    let shift = if deficient {
        cfg.mnar_strength * 2.2 * severity
    } else {
        0.0
    };
    round1((base.ln() - shift + 0.5 * std_normal(rng)).exp().max(1.0))
}

fn lab(pid: &str, analyte: Analyte, value: f64, at: DateTime<Utc>) -> LabResult {
    LabResult {
        patient_id: pid.to_string(),
        analyte,
        value,
        collected_at: at,
    }
}

fn draw_patient(cfg: &SynthConfig, index: usize) -> PatientDraw {
    let mut rng: ChaCha8Rng = substream(cfg.seed, &[index as u64]);
    let pid = format!("P{index:06}");
    let gender = if rng.gen_bool(0.5) {
        Gender::Male
    } else {
        Gender::Female
    };
    let age_at_start: f64 = rng.gen_range(18.0..90.0);
    let birth_date = cfg.study_start - Duration::days((age_at_start * 365.25) as i64);
    let iron_deficient = rng.gen_bool(cfg.iron_deficiency_prevalence);
    let severity = if iron_deficient {
        rng.gen_range(0.5..1.5)
    } else {
        0.0
    };
    let latent = PatientLatent {
        patient_id: pid.clone(),
        iron_deficient,
        severity,
        offsets: [
            0.6 * std_normal(&mut rng),
            0.6 * std_normal(&mut rng),
            0.6 * std_normal(&mut rng),
        ],
    };
    let ferritin_propensity = if iron_deficient { 0.35 } else { 0.05 };

    // pre-study visits
    let mut history = Vec::new();
    let mut history_ferritin = Vec::new();
    let history_start = cfg
        .study_start
        .with_year(cfg.study_start.year() - cfg.history_years as i32)
        .unwrap_or(cfg.study_start - Duration::days(365 * cfg.history_years as i64));
    let history_days = (cfg.study_start - history_start).num_days();
    let n_visits = if cfg.mean_history_visits > 0.0 && history_days > 0 {
        Poisson::new(cfg.mean_history_visits)
            .expect("positive mean")
            .sample(&mut rng) as usize
    } else {
        0
    };
    let mut visit_days: Vec<i64> = (0..n_visits)
        .map(|_| rng.gen_range(0..history_days))
        .collect();
    visit_days.sort_unstable();
    visit_days.dedup();
    for d in visit_days {
        let at = clinic_time(&mut rng, history_start + Duration::days(d));
        let (cbc, _) = draw_cbc(&mut rng, gender, &latent);
        for (k, a) in CBC_ANALYTES.iter().enumerate() {
            history.push(lab(&pid, *a, cbc[k], at));
        }
        if rng.gen_bool(0.7) {
            for (a, v) in chemistry(&mut rng) {
                history.push(lab(&pid, a, v, at));
            }
        }
        if rng.gen_bool(ferritin_propensity) {
            let f = ferritin_value(&mut rng, cfg, gender, &latent);
            history.push(lab(&pid, Analyte::Ferritin, f, at));
            let iron = round1(
                (if iron_deficient { 35.0 } else { 90.0 }) * (0.3 * std_normal(&mut rng)).exp(),
            );
            let tibc =
                round1((if iron_deficient { 420.0 } else { 320.0 }) + 40.0 * std_normal(&mut rng));
            history.push(lab(&pid, Analyte::Iron, iron, at));
            history.push(lab(&pid, Analyte::Tibc, tibc, at));
            history_ferritin.push(at);
        }
    }

    // study-window CBC events in disjoint 45-day slots
    let n_slots = (((cfg.study_end - cfg.study_start).num_days() + 1) / EVENT_SLOT_DAYS) as usize;
    let extra = if cfg.mean_extra_events > 0.0 {
        Poisson::new(cfg.mean_extra_events)
            .expect("positive mean")
            .sample(&mut rng) as usize
    } else {
        0
    };
    let n_events = (1 + extra).min(cfg.max_events).min(n_slots);
    let mut slots = sample(&mut rng, n_slots, n_events).into_vec();
    slots.sort_unstable();
    let c = cfg.coefficients;
    let events = slots
        .into_iter()
        .map(|slot| {
            let day = cfg.study_start
                + Duration::days(
                    slot as i64 * EVENT_SLOT_DAYS + rng.gen_range(0..=EVENT_JITTER_DAYS),
                );
            let t = clinic_time(&mut rng, day);
            let (cbc, z) = draw_cbc(&mut rng, gender, &latent);
            let mut results: Vec<LabResult> = CBC_ANALYTES
                .iter()
                .enumerate()
                .map(|(k, a)| lab(&pid, *a, cbc[k], t))
                .collect();
            if rng.gen_bool(0.5) {
                results.extend(
                    chemistry(&mut rng)
                        .into_iter()
                        .map(|(a, v)| lab(&pid, a, v, t)),
                );
            }
            let age = age_at(birth_date, t).expect("event after birth");
            let partial = c.low_hct * (-z[0]).max(0.0)
                + c.low_mcv * (-z[1]).max(0.0)
                + c.high_rdw * z[2].max(0.0)
                + c.age * (age - 50.0);
            let u_order = rng.gen::<f64>();
            let pre_cbc = rng.gen_bool(cfg.pre_cbc_fraction);
            let ferritin_at = if pre_cbc {
                t - Duration::minutes(rng.gen_range(1..=3))
            } else if rng.gen_bool(cfg.same_draw_fraction) {
                t
            } else {
                t + Duration::minutes(rng.gen_range(1..=30 * 24 * 60))
            };
            let ferritin_value = ferritin_value(&mut rng, cfg, gender, &latent);
            EventDraw {
                t,
                results,
                partial,
                u_order,
                pre_cbc,
                ferritin_at,
                ferritin_value,
                ferritin_window: resolve_window(t, t, AnchorMode::PerEvent),
            }
        })
        .collect();
    PatientDraw {
        patient: Patient {
            patient_id: pid,
            gender,
            birth_date,
        },
        latent,
        history,
        history_ferritin,
        events,
    }
}

/// Orders events in sequence: an earlier order's ferritin can make a later
/// event's prior-ferritin indicator true.
fn simulate(draw: &PatientDraw, b0: f64, coef_prior: f64) -> Sim {
    let mut ferritins = draw.history_ferritin.clone();
    let mut probs = Vec::with_capacity(draw.events.len());
    let mut ordered = Vec::with_capacity(draw.events.len());
    for e in &draw.events {
        let (lo, hi) = e.ferritin_window;
        let prior = ferritins.iter().any(|&f| f >= lo && f <= hi);
        let p = sigmoid(b0 + e.partial + if prior { coef_prior } else { 0.0 });
        let o = e.u_order < p;
        if o {
            ferritins.push(e.ferritin_at);
        }
        probs.push(p);
        ordered.push(o);
    }
    Sim { probs, ordered }
}

fn mean_prob(draws: &[PatientDraw], b0: f64, coef_prior: f64) -> f64 {
    let per: Vec<(f64, usize)> = draws
        .par_iter()
        .map(|d| {
            let s = simulate(d, b0, coef_prior);
            (s.probs.iter().sum::<f64>(), s.probs.len())
        })
        .collect();
    let (s, n) = per
        .iter()
        .fold((0.0, 0usize), |(s, n), &(a, b)| (s + a, n + b));
    s / n as f64
}

/// Intercept whose mean ordering probability is within the calibration
/// tolerance of the target, by bisection with the patients' random draws
/// held fixed.
fn calibrate_intercept(cfg: &SynthConfig, draws: &[PatientDraw]) -> Result<f64, SynthError> {
    let target = cfg.base_rate;
    let cp = cfg.coefficients.prior_ferritin;
    let (mut lo, mut hi) = (-30.0, 30.0);
    let (f_lo, f_hi) = (mean_prob(draws, lo, cp), mean_prob(draws, hi, cp));
    if !(f_lo < target && target < f_hi) {
        return Err(SynthError::CalibrationFailure {
            target,
            low: f_lo,
            high: f_hi,
        });
    }
    let mut best = (f64::INFINITY, 0.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let f = mean_prob(draws, mid, cp);
        if (f - target).abs() < best.0 {
            best = ((f - target).abs(), mid);
        }
        if (f - target).abs() <= CALIBRATION_TOLERANCE / 20.0 {
            break;
        }
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > CALIBRATION_TOLERANCE {
        return Err(SynthError::CalibrationFailure {
            target,
            low: f_lo,
            high: f_hi,
        });
    }
    Ok(best.1)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let draws: Vec<PatientDraw> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| draw_patient(cfg, i))
        .collect();
    let b0 = calibrate_intercept(cfg, &draws)?;
    let cp = cfg.coefficients.prior_ferritin;
    let per_patient: Vec<(Vec<LabResult>, Vec<EventTruth>)> = draws
        .par_iter()
        .map(|d| {
            let sim = simulate(d, b0, cp);
            let mut results = d.history.clone();
            let mut truth = Vec::with_capacity(d.events.len());
            for (k, e) in d.events.iter().enumerate() {
                results.extend(e.results.iter().cloned());
                if sim.ordered[k] {
                    results.push(lab(
                        &d.patient.patient_id,
                        Analyte::Ferritin,
                        e.ferritin_value,
                        e.ferritin_at,
                    ));
                }
                truth.push(EventTruth {
                    event_id: event_id(&d.patient.patient_id, e.t),
                    patient_id: d.patient.patient_id.clone(),
                    t: e.t,
                    true_prob: sim.probs[k],
                    iron_deficient: d.latent.iron_deficient,
                    ordered: sim.ordered[k],
                    pre_cbc_ferritin: sim.ordered[k] && e.pre_cbc,
                });
            }
            results.sort_by(|a, b| {
                a.collected_at
                    .cmp(&b.collected_at)
                    .then((a.analyte as usize).cmp(&(b.analyte as usize)))
            });
            (results, truth)
        })
        .collect();
    let patients: Vec<Patient> = draws.iter().map(|d| d.patient.clone()).collect();
    let latents: Vec<PatientLatent> = draws.into_iter().map(|d| d.latent).collect();
    let mut results = Vec::new();
    let mut events = Vec::new();
    for (r, t) in per_patient {
        results.extend(r);
        events.extend(t);
    }
    let probs: Vec<f64> = events.iter().map(|e| e.true_prob).collect();
    let labels: Vec<bool> = events.iter().map(|e| e.primary_label()).collect();
    let n_events = events.len();
    let meta = TruthMeta {
        n_patients: patients.len(),
        n_events,
        n_results: results.len(),
        intercept: b0,
        mean_true_prob: probs.iter().sum::<f64>() / n_events as f64,
        observed_order_rate: events.iter().filter(|e| e.ordered).count() as f64 / n_events as f64,
        n_pre_cbc_ferritin: events.iter().filter(|e| e.pre_cbc_ferritin).count(),
        bayes_auc: bayes_auc(&probs, &labels).unwrap_or(0.5),
        config: cfg.clone(),
    };
    Ok(SynthOutput {
        patients,
        results,
        truth: GroundTruth {
            events,
            patients: latents,
            meta,
        },
    })
}

pub const TRUTH_HEADER: [&str; 6] = [
    "event_id",
    "true_prob",
    "iron_deficient",
    "patient_id",
    "ordered",
    "pre_cbc_ferritin",
];

impl GroundTruth {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SynthError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRUTH_HEADER)?;
        for e in &self.events {
            w.write_record([
                e.event_id.as_str(),
                &e.true_prob.to_string(),
                if e.iron_deficient { "1" } else { "0" },
                &e.patient_id,
                if e.ordered { "1" } else { "0" },
                if e.pre_cbc_ferritin { "1" } else { "0" },
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_patients_csv<W: Write>(&self, out: W) -> Result<(), SynthError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "patient_id",
            "iron_deficient",
            "severity",
            "z_offset_hct",
            "z_offset_mcv",
            "z_offset_rdw",
        ])?;
        for p in &self.patients {
            w.write_record([
                p.patient_id.clone(),
                (p.iron_deficient as u8).to_string(),
                p.severity.to_string(),
                p.offsets[0].to_string(),
                p.offsets[1].to_string(),
                p.offsets[2].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `truth.csv` back as `(event_id, true_prob, iron_deficient,
    /// pre_cbc_ferritin)`.
    pub fn read_events<R: std::io::Read>(
        input: R,
    ) -> Result<Vec<(String, f64, bool, bool)>, SynthError> {
        let mut r = csv::Reader::from_reader(input);
        if r.headers()?.iter().ne(TRUTH_HEADER) {
            return Err(SynthError::InvalidConfig(
                "unexpected truth.csv header".into(),
            ));
        }
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let prob = rec[1]
                .parse()
                .map_err(|_| SynthError::InvalidConfig(format!("bad probability `{}`", &rec[1])))?;
            out.push((rec[0].to_string(), prob, &rec[2] == "1", &rec[5] == "1"));
        }
        Ok(out)
    }
}

pub const PATIENTS_FILE: &str = "patients.csv";
pub const LABS_FILE: &str = "labs.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const TRUTH_PATIENTS_FILE: &str = "truth_patients.csv";
pub const TRUTH_META_FILE: &str = "truth_meta.json";

impl SynthOutput {
    /// Writes the dataset and, separately, the ground truth into `dir`.
    pub fn write_dir(&self, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>, SynthError> {
        std::fs::create_dir_all(dir)?;
        let create = |name: &str| -> Result<
            (std::path::PathBuf, std::io::BufWriter<std::fs::File>),
            SynthError,
        > {
            let p = dir.join(name);
            Ok((
                p.clone(),
                std::io::BufWriter::new(std::fs::File::create(&p)?),
            ))
        };
        let mut written = Vec::new();
        let (p, f) = create(PATIENTS_FILE)?;
        write_patients_csv(&self.patients, f)?;
        written.push(p);
        let (p, f) = create(LABS_FILE)?;
        write_labs_csv(&self.results, f)?;
        written.push(p);
        let (p, f) = create(TRUTH_FILE)?;
        self.truth.write_csv(f)?;
        written.push(p);
        let (p, f) = create(TRUTH_PATIENTS_FILE)?;
        self.truth.write_patients_csv(f)?;
        written.push(p);
        let (p, mut f) = create(TRUTH_META_FILE)?;
        serde_json::to_writer_pretty(&mut f, &self.truth.meta)?;
        f.write_all(b"\n")?;
        f.flush()?;
        written.push(p);
        Ok(written)
    }
}
