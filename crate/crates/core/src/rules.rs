//! The eight hypothetical rule-based ferritin reflex protocols and their
//! concordance with actual ordering.

use chrono::{DateTime, Months, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::CbcEvent;
use crate::domain::{Analyte, DomainError, Gender, LabResult, ReferenceRanges};
use crate::metrics::{MetricError, Proportion};

#[derive(Debug, Error, PartialEq)]
pub enum RuleError {
    #[error("rule needs {0}, which is missing")]
    MissingParameter(Analyte),
    #[error(transparent)]
    Range(#[from] DomainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0} contexts for {1} events")]
    Misaligned(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReflexRule {
    LowHct,
    LowMcv,
    PriorFerritin,
    PriorFerritinAndLowHct,
    LowMcvAndHighRdw,
    LowHctOrLowMcv,
    PriorFerritinAndLowMcv,
    LowHctAndLowMcvAndHighRdw,
}

impl ReflexRule {
    pub const ALL: [ReflexRule; 8] = [
        ReflexRule::LowHct,
        ReflexRule::LowMcv,
        ReflexRule::PriorFerritin,
        ReflexRule::PriorFerritinAndLowHct,
        ReflexRule::LowMcvAndHighRdw,
        ReflexRule::LowHctOrLowMcv,
        ReflexRule::PriorFerritinAndLowMcv,
        ReflexRule::LowHctAndLowMcvAndHighRdw,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ReflexRule::LowHct => "LowHCT",
            ReflexRule::LowMcv => "LowMCV",
            ReflexRule::PriorFerritin => "PriorFerritin",
            ReflexRule::PriorFerritinAndLowHct => "PriorFerritin_and_LowHCT",
            ReflexRule::LowMcvAndHighRdw => "LowMCV_and_HighRDW",
            ReflexRule::LowHctOrLowMcv => "LowHCT_or_LowMCV",
            ReflexRule::PriorFerritinAndLowMcv => "PriorFerritin_and_LowMCV",
            ReflexRule::LowHctAndLowMcvAndHighRdw => "LowHCT_and_LowMCV_and_HighRDW",
        }
    }

    /// CBC parameters the rule reads; all must be present for it to be
    /// evaluated.
    pub fn required(self) -> &'static [Analyte] {
        use Analyte::*;
        match self {
            ReflexRule::LowHct | ReflexRule::PriorFerritinAndLowHct => &[Hematocrit],
            ReflexRule::LowMcv | ReflexRule::PriorFerritinAndLowMcv => &[Mcv],
            ReflexRule::PriorFerritin => &[],
            ReflexRule::LowMcvAndHighRdw => &[Mcv, Rdw],
            ReflexRule::LowHctOrLowMcv => &[Hematocrit, Mcv],
            ReflexRule::LowHctAndLowMcvAndHighRdw => &[Hematocrit, Mcv, Rdw],
        }
    }
}

impl std::fmt::Display for ReflexRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Inputs a rule sees for one CBC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleContext {
    pub hct: Option<f64>,
    pub mcv: Option<f64>,
    pub rdw: Option<f64>,
    pub gender: Gender,
    /// Any ferritin in `[t - 24 months, t)`.
    pub prior_ferritin: bool,
}

impl RuleContext {
    /// `results` are the patient's raw results (any analytes).
    pub fn for_event(event: &CbcEvent, results: &[LabResult]) -> Self {
        RuleContext {
            hct: event.cbc_value(Analyte::Hematocrit),
            mcv: event.cbc_value(Analyte::Mcv),
            rdw: event.cbc_value(Analyte::Rdw),
            gender: event.gender,
            prior_ferritin: had_prior_ferritin(event.t, results),
        }
    }
}

pub fn had_prior_ferritin(t: DateTime<Utc>, results: &[LabResult]) -> bool {
    let start = t
        .checked_sub_months(Months::new(24))
        .expect("date in range");
    results
        .iter()
        .any(|r| r.analyte == Analyte::Ferritin && r.collected_at >= start && r.collected_at < t)
}

struct Atoms {
    low_hct: bool,
    low_mcv: bool,
    high_rdw: bool,
    prior: bool,
}

fn atom(
    ranges: &ReferenceRanges,
    analyte: Analyte,
    gender: Gender,
    value: Option<f64>,
    below: bool,
) -> Result<Option<bool>, RuleError> {
    let Some(v) = value else { return Ok(None) };
    let r = ranges.reference_limit(analyte, gender)?;
    let hit = if below { r.is_below(v) } else { r.is_above(v) };
    Ok(Some(hit.unwrap_or(false)))
}

/// Strict comparisons against the gender-resolved limits: a value exactly
/// at the limit does not fire.
pub fn evaluate_rule(
    rule: ReflexRule,
    ctx: &RuleContext,
    ranges: &ReferenceRanges,
) -> Result<bool, RuleError> {
    for &a in rule.required() {
        let present = match a {
            Analyte::Hematocrit => ctx.hct.is_some(),
            Analyte::Mcv => ctx.mcv.is_some(),
            Analyte::Rdw => ctx.rdw.is_some(),
            _ => true,
        };
        if !present {
            return Err(RuleError::MissingParameter(a));
        }
    }
    let x = Atoms {
        low_hct: atom(ranges, Analyte::Hematocrit, ctx.gender, ctx.hct, true)?.unwrap_or(false),
        low_mcv: atom(ranges, Analyte::Mcv, ctx.gender, ctx.mcv, true)?.unwrap_or(false),
        high_rdw: atom(ranges, Analyte::Rdw, ctx.gender, ctx.rdw, false)?.unwrap_or(false),
        prior: ctx.prior_ferritin,
    };
    Ok(match rule {
        ReflexRule::LowHct => x.low_hct,
        ReflexRule::LowMcv => x.low_mcv,
        ReflexRule::PriorFerritin => x.prior,
        ReflexRule::PriorFerritinAndLowHct => x.prior && x.low_hct,
        ReflexRule::LowMcvAndHighRdw => x.low_mcv && x.high_rdw,
        ReflexRule::LowHctOrLowMcv => x.low_hct || x.low_mcv,
        ReflexRule::PriorFerritinAndLowMcv => x.prior && x.low_mcv,
        ReflexRule::LowHctAndLowMcvAndHighRdw => x.low_hct && x.low_mcv && x.high_rdw,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl Confusion {
    pub fn add(&mut self, label: bool, fired: bool) {
        match (label, fired) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
        }
    }

    /// `None` when there are no positives.
    pub fn sensitivity(&self) -> Option<Proportion> {
        Proportion::new(self.tp, self.tp + self.fn_).ok()
    }

    /// `None` when there are no negatives.
    pub fn specificity(&self) -> Option<Proportion> {
        Proportion::new(self.tn, self.tn + self.fp).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleScore {
    pub rule: ReflexRule,
    pub confusion: Confusion,
    pub n_excluded: u64,
    pub sensitivity: Proportion,
    pub specificity: Proportion,
}

/// Scores `rule` against the labels of `events`; events missing a required
/// parameter are excluded and tallied.
pub fn rule_confusion<'a>(
    rule: ReflexRule,
    events: impl IntoIterator<Item = (&'a CbcEvent, &'a RuleContext)>,
    ranges: &ReferenceRanges,
) -> Result<RuleScore, RuleError> {
    let mut confusion = Confusion::default();
    let mut n_excluded = 0;
    for (e, ctx) in events {
        match evaluate_rule(rule, ctx, ranges) {
            Ok(fired) => confusion.add(e.label, fired),
            Err(RuleError::MissingParameter(_)) => n_excluded += 1,
            Err(other) => return Err(other),
        }
    }
    let sensitivity = confusion.sensitivity().ok_or(MetricError::UndefinedRate)?;
    let specificity = confusion.specificity().ok_or(MetricError::UndefinedRate)?;
    Ok(RuleScore {
        rule,
        confusion,
        n_excluded,
        sensitivity,
        specificity,
    })
}

/// All eight rules over aligned `events` / `contexts`.
pub fn score_all(
    events: &[&CbcEvent],
    contexts: &[RuleContext],
    ranges: &ReferenceRanges,
) -> Result<Vec<RuleScore>, RuleError> {
    if events.len() != contexts.len() {
        return Err(RuleError::Misaligned(contexts.len(), events.len()));
    }
    ReflexRule::ALL
        .iter()
        .map(|&r| rule_confusion(r, events.iter().copied().zip(contexts), ranges))
        .collect()
}

pub const RULES_REPORT_HEADER: [&str; 10] = [
    "rule_id",
    "sensitivity",
    "sens_ci_low",
    "sens_ci_high",
    "specificity",
    "spec_ci_low",
    "spec_ci_high",
    "n_pos",
    "n_neg",
    "n_excluded",
];

pub fn write_rules_report<W: std::io::Write>(scores: &[RuleScore], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RULES_REPORT_HEADER)?;
    for s in scores {
        w.write_record([
            s.rule.id().to_string(),
            s.sensitivity.point.to_string(),
            s.sensitivity.ci_low.to_string(),
            s.sensitivity.ci_high.to_string(),
            s.specificity.point.to_string(),
            s.specificity.ci_low.to_string(),
            s.specificity.ci_high.to_string(),
            s.sensitivity.n.to_string(),
            s.specificity.n.to_string(),
            s.n_excluded.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};

    fn ctx(hct: f64, mcv: f64, rdw: f64, gender: Gender, prior: bool) -> RuleContext {
        RuleContext {
            hct: Some(hct),
            mcv: Some(mcv),
            rdw: Some(rdw),
            gender,
            prior_ferritin: prior,
        }
    }

    #[test]
    fn table_examples() {
        let r = ReferenceRanges::default();
        let c = ctx(45.0, 78.0, 15.0, Gender::Female, false);
        assert!(evaluate_rule(ReflexRule::LowMcvAndHighRdw, &c, &r).unwrap());
        let c = ctx(45.0, 78.0, 14.0, Gender::Female, false);
        assert!(!evaluate_rule(ReflexRule::LowMcvAndHighRdw, &c, &r).unwrap());
        let c = ctx(41.0, 90.0, 13.0, Gender::Male, false);
        assert!(!evaluate_rule(ReflexRule::LowHct, &c, &r).unwrap());
        let c = ctx(40.9, 90.0, 13.0, Gender::Male, false);
        assert!(evaluate_rule(ReflexRule::LowHct, &c, &r).unwrap());
        // the same HCT is normal for a female
        let c = ctx(40.9, 90.0, 13.0, Gender::Female, false);
        assert!(!evaluate_rule(ReflexRule::LowHct, &c, &r).unwrap());
    }

    #[test]
    fn missing_parameter() {
        let r = ReferenceRanges::default();
        let mut c = ctx(30.0, 70.0, 16.0, Gender::Male, true);
        c.rdw = None;
        assert_eq!(
            evaluate_rule(ReflexRule::LowMcvAndHighRdw, &c, &r),
            Err(RuleError::MissingParameter(Analyte::Rdw))
        );
        assert!(evaluate_rule(ReflexRule::LowHctOrLowMcv, &c, &r).unwrap());
        c.hct = None;
        assert!(evaluate_rule(ReflexRule::PriorFerritin, &c, &r).unwrap());
        assert!(evaluate_rule(ReflexRule::LowHctOrLowMcv, &c, &r).is_err());
    }

    #[test]
    fn prior_ferritin_window() {
        let t = Utc.with_ymd_and_hms(2021, 6, 1, 9, 0, 0).unwrap();
        let f = |at| LabResult {
            patient_id: "p".into(),
            analyte: Analyte::Ferritin,
            value: 50.0,
            collected_at: at,
        };
        let m18 = t.checked_sub_months(Months::new(18)).unwrap();
        let m25 = t.checked_sub_months(Months::new(25)).unwrap();
        assert!(had_prior_ferritin(t, &[f(m18)]));
        assert!(!had_prior_ferritin(t, &[f(m25)]));
        assert!(!had_prior_ferritin(t, &[f(t)]));
        assert!(had_prior_ferritin(t, &[f(t - Duration::minutes(1))]));
    }

    fn event(label: bool) -> CbcEvent {
        CbcEvent {
            event_id: "e".into(),
            patient_id: "p".into(),
            t: Utc.with_ymd_and_hms(2021, 6, 1, 9, 0, 0).unwrap(),
            cbc: [None; 9],
            label,
            age_years: 50.0,
            gender: Gender::Male,
        }
    }

    #[test]
    fn confusion_counts() {
        let r = ReferenceRanges::default();
        let events = [event(true), event(true), event(false), event(false)];
        let low = ctx(30.0, 90.0, 13.0, Gender::Male, false);
        let ok = ctx(45.0, 90.0, 13.0, Gender::Male, false);
        let ctxs = [low, ok, low, ok];
        let s = rule_confusion(ReflexRule::LowHct, events.iter().zip(&ctxs), &r).unwrap();
        assert_eq!(s.sensitivity.point, 0.5);
        assert_eq!(s.specificity.point, 0.5);
        assert!((s.sensitivity.ci_low - 0.0945).abs() < 1e-3);
        assert!((s.sensitivity.ci_high - 0.9055).abs() < 1e-3);

        let ctxs = [low, low, ok, ok];
        let s = rule_confusion(ReflexRule::LowHct, events.iter().zip(&ctxs), &r).unwrap();
        assert_eq!((s.sensitivity.point, s.specificity.point), (1.0, 1.0));

        let only_pos = [event(true)];
        assert!(rule_confusion(ReflexRule::LowHct, only_pos.iter().zip(&[low]), &r).is_err());
    }

    #[test]
    fn report_header() {
        let mut buf = Vec::new();
        write_rules_report(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().trim(),
            RULES_REPORT_HEADER.join(",")
        );
    }
}
