//! Analyses over test-partition predictions: rules against the model, the
//! decile analysis of ferritin abnormality, the chart-review queue, and the
//! reflex decision modes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CbcEvent, LabelPolicy};
use crate::domain::{Analyte, DomainError, Gender, LabResult, ReferenceRanges};
use crate::learn::substream;
use crate::metrics::{interpolate_upper, roc_curve, spearman_rho, MetricError, Proportion};
use crate::rules::{rule_confusion, Confusion, ReflexRule, RuleContext, RuleError, RuleScore};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {needed} events, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Range(#[from] DomainError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// One test-partition prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPrediction {
    pub run: usize,
    pub event_id: String,
    pub patient_id: String,
    pub label: bool,
    pub prob: f64,
}

pub const PREDICTIONS_HEADER: [&str; 5] = ["run", "event_id", "patient_id", "label", "prob"];

pub fn write_predictions<W: Write>(preds: &[TestPrediction], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PREDICTIONS_HEADER)?;
    for p in preds {
        w.write_record([
            p.run.to_string(),
            p.event_id.clone(),
            p.patient_id.clone(),
            (p.label as u8).to_string(),
            p.prob.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_predictions<R: Read>(input: R) -> Result<Vec<TestPrediction>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(PREDICTIONS_HEADER) {
        return Err(AnalysisError::InvalidInput("predictions header".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || AnalysisError::InvalidInput(format!("bad prediction row {:?}", rec));
        let prob: f64 = rec[4].parse().map_err(|_| bad())?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(bad());
        }
        out.push(TestPrediction {
            run: rec[0].parse().map_err(|_| bad())?,
            event_id: rec[1].to_string(),
            patient_id: rec[2].to_string(),
            label: match &rec[3] {
                "1" => true,
                "0" => false,
                _ => return Err(bad()),
            },
            prob,
        });
    }
    Ok(out)
}

/// An event's probabilities from the runs where it was in the test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventProbability {
    pub event_id: String,
    pub label: bool,
    /// `(run, probability)`, ordered by run.
    pub probs: Vec<(usize, f64)>,
    pub mean_prob: f64,
    pub median_prob: f64,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

impl EventProbability {
    pub fn new(event_id: String, label: bool, mut probs: Vec<(usize, f64)>) -> Option<Self> {
        if probs.is_empty() {
            return None;
        }
        probs.sort_by_key(|p| p.0);
        let mut v: Vec<f64> = probs.iter().map(|p| p.1).collect();
        let mean_prob = v.iter().sum::<f64>() / v.len() as f64;
        let median_prob = median(&mut v);
        Some(EventProbability {
            event_id,
            label,
            probs,
            mean_prob,
            median_prob,
        })
    }

    /// The same event seen only through runs `< n_runs`.
    pub fn restricted(&self, n_runs: usize) -> Option<Self> {
        let probs = self
            .probs
            .iter()
            .copied()
            .filter(|p| p.0 < n_runs)
            .collect();
        EventProbability::new(self.event_id.clone(), self.label, probs)
    }
}

/// Groups predictions by event, ordered by event id.
pub fn event_probabilities(preds: &[TestPrediction]) -> Vec<EventProbability> {
    let mut by_event: BTreeMap<&str, (bool, Vec<(usize, f64)>)> = BTreeMap::new();
    for p in preds {
        by_event
            .entry(&p.event_id)
            .or_insert_with(|| (p.label, Vec::new()))
            .1
            .push((p.run, p.prob));
    }
    by_event
        .into_iter()
        .filter_map(|(id, (label, probs))| EventProbability::new(id.to_string(), label, probs))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleComparison {
    pub score: RuleScore,
    /// Model true-positive rate at the rule's false-positive rate.
    pub model_sensitivity_at_specificity: f64,
    /// Model true-negative rate at the rule's true-positive rate.
    pub model_specificity_at_sensitivity: f64,
}

impl RuleComparison {
    pub fn model_dominates(&self) -> bool {
        self.model_sensitivity_at_specificity >= self.score.sensitivity.point
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomControl {
    pub confusion: Confusion,
    pub sensitivity: Proportion,
    pub specificity: Proportion,
}

impl RandomControl {
    /// Whether some point of the diagonal `sensitivity = 1 - specificity`
    /// lies inside both intervals.
    pub fn on_diagonal(&self) -> bool {
        let lo = self.sensitivity.ci_low.max(1.0 - self.specificity.ci_high);
        let hi = self.sensitivity.ci_high.min(1.0 - self.specificity.ci_low);
        lo <= hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulesVsModel {
    pub n_events: usize,
    pub model_auroc: f64,
    pub model_roc: Vec<(f64, f64)>,
    pub rules: Vec<RuleComparison>,
    pub random_control: RandomControl,
}

/// Model specificity at sensitivity `tpr`: the smallest false-positive rate
/// that reaches `tpr`, interpolated linearly.
fn specificity_at(roc: &[(f64, f64)], tpr: f64) -> f64 {
    let swapped: Vec<(f64, f64)> = roc.iter().map(|&(f, t)| (t, -f)).collect();
    1.0 + interpolate_upper(&swapped, tpr)
}

/// Compares the eight rules with the model over the same events. Each item is
/// an event, its rule inputs and the model's probability for it (typically
/// the mean over the runs where it was in test). The random control fires
/// each event with probability 1/2 from a stream keyed by `seed`.
pub fn compare_rules_vs_model(
    items: &[(&CbcEvent, &RuleContext, f64)],
    ranges: &ReferenceRanges,
    seed: u64,
) -> Result<RulesVsModel> {
    let probs: Vec<f64> = items.iter().map(|i| i.2).collect();
    let labels: Vec<bool> = items.iter().map(|i| i.0.label).collect();
    let roc = roc_curve(&probs, &labels)?;
    let rules = ReflexRule::ALL
        .iter()
        .map(|&rule| {
            let score = rule_confusion(rule, items.iter().map(|i| (i.0, i.1)), ranges)?;
            let fpr = 1.0 - score.specificity.point;
            Ok(RuleComparison {
                model_sensitivity_at_specificity: interpolate_upper(&roc.points, fpr),
                model_specificity_at_sensitivity: specificity_at(
                    &roc.points,
                    score.sensitivity.point,
                ),
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = substream(seed, &[0x7a11d]);
    let mut confusion = Confusion::default();
    for &l in &labels {
        confusion.add(l, rng.gen_bool(0.5));
    }
    let random_control = RandomControl {
        confusion,
        sensitivity: confusion.sensitivity().ok_or(MetricError::UndefinedRate)?,
        specificity: confusion.specificity().ok_or(MetricError::UndefinedRate)?,
    };
    Ok(RulesVsModel {
        n_events: items.len(),
        model_auroc: roc.area,
        model_roc: roc.points,
        rules,
        random_control,
    })
}

pub const FIGURE4_HEADER: [&str; 13] = [
    "kind",
    "id",
    "fpr",
    "tpr",
    "sensitivity",
    "sens_ci_low",
    "sens_ci_high",
    "specificity",
    "spec_ci_low",
    "spec_ci_high",
    "model_sens_at_spec",
    "model_spec_at_sens",
    "n_excluded",
];

impl RulesVsModel {
    /// Model curve points, then one row per rule, then the random control.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(FIGURE4_HEADER)?;
        for (i, &(f, t)) in self.model_roc.iter().enumerate() {
            let mut row = vec![
                "model".to_string(),
                i.to_string(),
                f.to_string(),
                t.to_string(),
            ];
            row.resize(FIGURE4_HEADER.len(), String::new());
            w.write_record(&row)?;
        }
        let point = |kind: &str, id: &str, s: &Proportion, p: &Proportion| {
            vec![
                kind.to_string(),
                id.to_string(),
                (1.0 - p.point).to_string(),
                s.point.to_string(),
                s.point.to_string(),
                s.ci_low.to_string(),
                s.ci_high.to_string(),
                p.point.to_string(),
                p.ci_low.to_string(),
                p.ci_high.to_string(),
            ]
        };
        for r in &self.rules {
            let mut row = point(
                "rule",
                r.score.rule.id(),
                &r.score.sensitivity,
                &r.score.specificity,
            );
            row.push(r.model_sensitivity_at_specificity.to_string());
            row.push(r.model_specificity_at_sensitivity.to_string());
            row.push(r.score.n_excluded.to_string());
            w.write_record(&row)?;
        }
        let rc = &self.random_control;
        let mut row = point("random", "random_reflex", &rc.sensitivity, &rc.specificity);
        row.extend([String::new(), String::new(), "0".to_string()]);
        w.write_record(&row)?;
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// The first ferritin the label policy counts for `event`.
pub fn label_ferritin(
    event: &CbcEvent,
    results: &[LabResult],
    policy: &LabelPolicy,
) -> Option<f64> {
    results
        .iter()
        .filter(|r| r.analyte == Analyte::Ferritin && policy.covers(event.t, r.collected_at))
        .min_by_key(|r| r.collected_at)
        .map(|r| r.value)
}

/// A labelled-positive event entering the decile analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MnarItem {
    pub prob: f64,
    pub gender: Gender,
    pub ferritin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    /// 1 (lowest probabilities) to 10.
    pub decile: usize,
    pub n: u64,
    pub n_low: u64,
    pub proportion: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub prob_min: f64,
    pub prob_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnarTable {
    pub deciles: Vec<DecileRow>,
    pub rho: f64,
}

pub const MNAR_HEADER: [&str; 8] = [
    "decile",
    "n",
    "n_low",
    "proportion",
    "ci_low",
    "ci_high",
    "prob_min",
    "prob_max",
];

impl MnarTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(MNAR_HEADER)?;
        for d in &self.deciles {
            w.write_record([
                d.decile.to_string(),
                d.n.to_string(),
                d.n_low.to_string(),
                d.proportion.to_string(),
                d.ci_low.to_string(),
                d.ci_high.to_string(),
                d.prob_min.to_string(),
                d.prob_max.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Equal-count deciles by probability (ties broken by input order); per
/// decile, the share of ferritins below the gender-specific low limit with
/// its Wilson interval, and the Spearman correlation of decile index with
/// that share.
pub fn mnar_decile_analysis(items: &[MnarItem], ranges: &ReferenceRanges) -> Result<MnarTable> {
    let n = items.len();
    if n < 10 {
        return Err(AnalysisError::InsufficientData { needed: 10, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| items[a].prob.total_cmp(&items[b].prob).then(a.cmp(&b)));
    let mut deciles = Vec::with_capacity(10);
    for d in 0..10 {
        let members = &order[d * n / 10..(d + 1) * n / 10];
        let mut n_low = 0;
        for &i in members {
            let lim = ranges.reference_limit(Analyte::Ferritin, items[i].gender)?;
            if lim.is_below(items[i].ferritin) == Some(true) {
                n_low += 1;
            }
        }
        let p = Proportion::new(n_low, members.len() as u64)?;
        deciles.push(DecileRow {
            decile: d + 1,
            n: p.n,
            n_low,
            proportion: p.point,
            ci_low: p.ci_low,
            ci_high: p.ci_high,
            prob_min: items[members[0]].prob,
            prob_max: items[*members.last().expect("non-empty decile")].prob,
        });
    }
    let xs: Vec<f64> = (1..=10).map(|d| d as f64).collect();
    let ys: Vec<f64> = deciles.iter().map(|d| d.proportion).collect();
    let rho = spearman_rho(&xs, &ys)?;
    Ok(MnarTable { deciles, rho })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueGroup {
    /// `(event_id, median probability)` of the k extreme events.
    pub selected: Vec<(String, f64)>,
    /// Uniform sample of `selected`, in selection order.
    pub sampled: Vec<(String, f64)>,
    /// Least extreme probability in the group: "at most" for ordered
    /// events, "at least" for events without an order.
    pub cutoff: f64,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueue {
    /// Ferritin ordered, lowest predicted probability.
    pub ordered_low: QueueGroup,
    /// No ferritin ordered, highest predicted probability.
    pub not_ordered_high: QueueGroup,
}

fn queue_group(
    mut pool: Vec<(String, f64)>,
    ascending: bool,
    k: usize,
    m: usize,
    rng: &mut impl Rng,
    name: &str,
) -> Result<QueueGroup> {
    pool.sort_by(|a, b| {
        let c = a.1.total_cmp(&b.1);
        (if ascending { c } else { c.reverse() }).then_with(|| a.0.cmp(&b.0))
    });
    let truncated = pool.len() < k;
    if truncated {
        warn!(
            "only {} qualifying {name} events for a queue of {k}",
            pool.len()
        );
    }
    pool.truncate(k);
    let Some(last) = pool.last() else {
        return Err(AnalysisError::InsufficientData { needed: 1, got: 0 });
    };
    let cutoff = last.1;
    let mut idx = sample(rng, pool.len(), m.min(pool.len())).into_vec();
    idx.sort_unstable();
    let sampled = idx.into_iter().map(|i| pool[i].clone()).collect();
    Ok(QueueGroup {
        selected: pool,
        sampled,
        cutoff,
        truncated,
    })
}

/// Extracts the chart-review queue from events that fell in a test partition
/// in at least one of the first `runs_considered` runs, using the median
/// probability over those runs.
pub fn review_queue(
    events: &[EventProbability],
    k: usize,
    m: usize,
    runs_considered: usize,
    seed: u64,
) -> Result<ReviewQueue> {
    let eligible: Vec<EventProbability> = events
        .iter()
        .filter_map(|e| e.restricted(runs_considered))
        .collect();
    let pool = |label: bool| -> Vec<(String, f64)> {
        eligible
            .iter()
            .filter(|e| e.label == label)
            .map(|e| (e.event_id.clone(), e.median_prob))
            .collect()
    };
    let mut rng = substream(seed, &[0x9e71e3]);
    let ordered_low = queue_group(pool(true), true, k, m, &mut rng, "ordered")?;
    let not_ordered_high = queue_group(pool(false), false, k, m, &mut rng, "not-ordered")?;
    Ok(ReviewQueue {
        ordered_low,
        not_ordered_high,
    })
}

pub const REVIEW_QUEUE_HEADER: [&str; 4] = ["group", "event_id", "median_prob", "sampled"];

impl ReviewQueue {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REVIEW_QUEUE_HEADER)?;
        for (name, g) in [
            ("ordered_low", &self.ordered_low),
            ("not_ordered_high", &self.not_ordered_high),
        ] {
            for (id, p) in &g.selected {
                let sampled = g.sampled.iter().any(|s| &s.0 == id);
                w.write_record([name, id, &p.to_string(), if sampled { "1" } else { "0" }])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    /// CBC ordered with a ferritin reflex; the model may cancel the ferritin.
    Variation1Cancel,
    /// CBC ordered alone; the model may add a ferritin.
    Variation2Add,
}

impl DecisionMode {
    pub fn default_threshold(self) -> f64 {
        match self {
            DecisionMode::Variation1Cancel => 0.05,
            DecisionMode::Variation2Add => 0.52,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub mode: DecisionMode,
    pub threshold: f64,
}

impl OperatingPoint {
    pub fn new(mode: DecisionMode, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(AnalysisError::InvalidInput(format!(
                "threshold {threshold} outside [0, 1]"
            )));
        }
        Ok(OperatingPoint { mode, threshold })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReflexAction {
    AddFerritin,
    CancelFerritin,
    NoAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflexDecision {
    pub action: ReflexAction,
    pub probability: f64,
    pub operating_point: OperatingPoint,
}

/// Cancels a clinician's reflex ferritin below the variation-1 threshold, or
/// adds a ferritin at or above the variation-2 threshold when none was
/// ordered. Anything else is left alone.
pub fn reflex_decide(
    probability: f64,
    op: OperatingPoint,
    clinician_ordered_reflex: bool,
) -> Result<ReflexDecision> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(AnalysisError::InvalidInput(format!(
            "probability {probability} outside [0, 1]"
        )));
    }
    let action = match op.mode {
        DecisionMode::Variation1Cancel
            if clinician_ordered_reflex && probability < op.threshold =>
        {
            ReflexAction::CancelFerritin
        }
        DecisionMode::Variation2Add if !clinician_ordered_reflex && probability >= op.threshold => {
            ReflexAction::AddFerritin
        }
        _ => ReflexAction::NoAction,
    };
    Ok(ReflexDecision {
        action,
        probability,
        operating_point: op,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn event(i: usize, label: bool) -> CbcEvent {
        CbcEvent {
            event_id: format!("e{i:03}"),
            patient_id: format!("p{i}"),
            t: Utc.with_ymd_and_hms(2021, 3, 1, 9, 0, 0).unwrap(),
            cbc: [None; 9],
            label,
            age_years: 50.0,
            gender: Gender::Female,
        }
    }

    fn ctx(hct: f64, mcv: f64, rdw: f64, prior: bool) -> RuleContext {
        RuleContext {
            hct: Some(hct),
            mcv: Some(mcv),
            rdw: Some(rdw),
            gender: Gender::Female,
            prior_ferritin: prior,
        }
    }

    #[test]
    fn reflex_decide_examples() {
        let v1 = OperatingPoint::new(DecisionMode::Variation1Cancel, 0.05).unwrap();
        let v2 = OperatingPoint::new(DecisionMode::Variation2Add, 0.52).unwrap();
        assert_eq!(
            reflex_decide(0.03, v1, true).unwrap().action,
            ReflexAction::CancelFerritin
        );
        assert_eq!(
            reflex_decide(0.60, v2, false).unwrap().action,
            ReflexAction::AddFerritin
        );
        assert_eq!(
            reflex_decide(0.30, v1, true).unwrap().action,
            ReflexAction::NoAction
        );
        assert_eq!(
            reflex_decide(0.30, v2, false).unwrap().action,
            ReflexAction::NoAction
        );
        assert_eq!(
            reflex_decide(0.52, v2, false).unwrap().action,
            ReflexAction::AddFerritin
        );
        assert!(OperatingPoint::new(DecisionMode::Variation2Add, 1.2).is_err());
        assert!(reflex_decide(-0.1, v1, true).is_err());
    }

    #[test]
    fn decision_json_shape() {
        let v1 = OperatingPoint::new(DecisionMode::Variation1Cancel, 0.05).unwrap();
        let json = serde_json::to_string(&reflex_decide(0.03, v1, true).unwrap()).unwrap();
        assert!(json.contains("\"action\":\"CANCEL_FERRITIN\""));
        assert!(json.contains("\"mode\":\"variation1_cancel\""));
    }

    #[test]
    fn event_probability_mean_and_median() {
        let e =
            EventProbability::new("a".into(), true, vec![(2, 0.3), (0, 0.1), (1, 0.9)]).unwrap();
        assert_eq!(e.probs[0], (0, 0.1));
        assert!((e.mean_prob - 1.3 / 3.0).abs() < 1e-15);
        assert_eq!(e.median_prob, 0.3);
        let r = e.restricted(2).unwrap();
        assert_eq!(r.median_prob, 0.5);
        assert!(e.restricted(0).is_none());
    }

    #[test]
    fn review_queue_selects_order_statistics() {
        let mut events: Vec<EventProbability> = [0.9, 0.01, 0.5, 0.02, 0.6]
            .iter()
            .enumerate()
            .map(|(i, &p)| EventProbability::new(format!("o{i}"), true, vec![(0, p)]).unwrap())
            .collect();
        for i in 0..4 {
            events.push(
                EventProbability::new(format!("n{i}"), false, vec![(1, i as f64 / 10.0)]).unwrap(),
            );
        }
        // seen only in run 5: not eligible
        events.push(EventProbability::new("late".into(), true, vec![(5, 0.0)]).unwrap());
        let q = review_queue(&events, 2, 1, 3, 11).unwrap();
        let probs: Vec<f64> = q.ordered_low.selected.iter().map(|s| s.1).collect();
        assert_eq!(probs, vec![0.01, 0.02]);
        assert_eq!(q.ordered_low.cutoff, 0.02);
        assert_eq!(q.not_ordered_high.cutoff, 0.2);
        assert_eq!(q.ordered_low.sampled.len(), 1);
        assert_eq!(q, review_queue(&events, 2, 1, 3, 11).unwrap());
        let big = review_queue(&events, 50, 3, 3, 11).unwrap();
        assert!(big.ordered_low.truncated);
        assert_eq!(big.ordered_low.selected.len(), 5);
    }

    #[test]
    fn thresholded_rule_matches_model_point() {
        let ranges = ReferenceRanges::default();
        let mut events = Vec::new();
        let mut ctxs = Vec::new();
        for i in 0..40 {
            let low = i % 3 == 0;
            events.push(event(i, (i % 5 == 0) ^ low));
            ctxs.push(ctx(if low { 30.0 } else { 40.0 }, 90.0, 13.0, false));
        }
        let items: Vec<(&CbcEvent, &RuleContext, f64)> = events
            .iter()
            .zip(&ctxs)
            .map(|(e, c)| (e, c, if c.hct.unwrap() < 36.0 { 1.0 } else { 0.0 }))
            .collect();
        let cmp = compare_rules_vs_model(&items, &ranges, 1).unwrap();
        let low_hct = &cmp.rules[0];
        assert_eq!(low_hct.score.rule, ReflexRule::LowHct);
        assert_eq!(
            low_hct.model_sensitivity_at_specificity,
            low_hct.score.sensitivity.point
        );
        assert_eq!(
            low_hct.model_specificity_at_sensitivity,
            low_hct.score.specificity.point
        );
        let mut buf = Vec::new();
        cmp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().any(|l| l.starts_with("rule,LowHCT,")));
        assert!(text.lines().any(|l| l.starts_with("random,random_reflex,")));
    }

    #[test]
    fn specificity_lookup_prefers_smallest_fpr() {
        let roc = vec![(0.0, 0.0), (0.2, 0.5), (0.6, 0.5), (1.0, 1.0)];
        assert!((specificity_at(&roc, 0.5) - 0.8).abs() < 1e-15);
        assert!((specificity_at(&roc, 0.25) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn monotone_deciles_give_rho_one() {
        let ranges = ReferenceRanges::default();
        // decile d has d low ferritins out of 10
        let mut items = Vec::new();
        for d in 0..10 {
            for j in 0..10 {
                items.push(MnarItem {
                    prob: d as f64 / 10.0 + j as f64 / 1000.0,
                    gender: Gender::Male,
                    ferritin: if j < d { 5.0 } else { 100.0 },
                });
            }
        }
        let t = mnar_decile_analysis(&items, &ranges).unwrap();
        assert_eq!(t.rho, 1.0);
        assert_eq!(t.deciles[3].n_low, 3);
        assert_eq!(t.deciles.iter().map(|d| d.n).sum::<u64>(), 100);
        assert!(matches!(
            mnar_decile_analysis(&items[..9], &ranges),
            Err(AnalysisError::InsufficientData { .. })
        ));
    }

    #[test]
    fn predictions_round_trip() {
        let preds = vec![
            TestPrediction {
                run: 0,
                event_id: "a".into(),
                patient_id: "p".into(),
                label: true,
                prob: 0.125,
            },
            TestPrediction {
                run: 3,
                event_id: "b".into(),
                patient_id: "q".into(),
                label: false,
                prob: 0.1 + 0.2,
            },
        ];
        let mut buf = Vec::new();
        write_predictions(&preds, &mut buf).unwrap();
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), preds);
    }
}
