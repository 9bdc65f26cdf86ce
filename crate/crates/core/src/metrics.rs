//! Discrimination and calibration metrics, cross-run aggregation, and the
//! small statistics used by the analyses (Wilson intervals, Spearman rho).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("rate undefined: zero trials")]
    UndefinedRate,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Number of points in the fixed interpolation grid used for ribbons.
pub const GRID_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// `(x, y)`; for ROC `(fpr, tpr)`, for PR `(recall, precision)`.
    pub points: Vec<(f64, f64)>,
    pub area: f64,
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::InvalidInput(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::InvalidInput("NaN score".into()));
    }
    Ok(())
}

/// Per distinct score (descending): `(positives, negatives)` at that score.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut p, mut n) = (0, 0);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        groups.push((p, n));
    }
    groups
}

/// ROC points over every distinct threshold (ties grouped) and the
/// trapezoidal area, which equals the Mann-Whitney statistic with ties
/// counted as one half.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Curve, MetricError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::UndefinedMetric("ROC needs both classes"));
    }
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area in units of one (positive, negative) pair
    let mut twice_area: u128 = 0;
    for (p, n) in tie_groups(scores, labels) {
        twice_area += n as u128 * (2 * tp + p) as u128;
        tp += p;
        fp += n;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let area = twice_area as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(Curve { points, area })
}

/// Precision-recall points over every distinct threshold, starting at
/// `(0, 1)`; area by step-wise (average precision) summation.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Curve, MetricError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    if pos == 0 {
        return Err(MetricError::UndefinedMetric("PR needs a positive"));
    }
    let mut points = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok(Curve { points, area })
}

pub fn brier_loss(probs: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(probs, labels)?;
    if probs.is_empty() {
        return Err(MetricError::UndefinedMetric("Brier loss of no predictions"));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(MetricError::InvalidInput(
            "probability outside [0, 1]".into(),
        ));
    }
    let s: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let d = p - if y { 1.0 } else { 0.0 };
            d * d
        })
        .sum();
    Ok(s / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_predicted: f64,
    pub observed_rate: f64,
    pub n: usize,
}

/// Equal-width bins on [0, 1]; empty bins omitted.
pub fn calibration_curve(
    probs: &[f64],
    labels: &[bool],
    n_bins: usize,
) -> Result<Vec<CalibrationBin>, MetricError> {
    check_lengths(probs, labels)?;
    if n_bins < 2 {
        return Err(MetricError::InvalidInput("need at least 2 bins".into()));
    }
    let mut sum_p = vec![0.0; n_bins];
    let mut pos = vec![0usize; n_bins];
    let mut n = vec![0usize; n_bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * n_bins as f64).floor() as usize).min(n_bins - 1);
        sum_p[b] += p;
        pos[b] += y as usize;
        n[b] += 1;
    }
    Ok((0..n_bins)
        .filter(|&b| n[b] > 0)
        .map(|b| CalibrationBin {
            mean_predicted: sum_p[b] / n[b] as f64,
            observed_rate: pos[b] as f64 / n[b] as f64,
            n: n[b],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub brier: f64,
    pub roc_points: Vec<(f64, f64)>,
    pub pr_points: Vec<(f64, f64)>,
    pub calibration_bins: Vec<CalibrationBin>,
}

impl RunMetrics {
    pub fn compute(
        run: usize,
        probs: &[f64],
        labels: &[bool],
        n_bins: usize,
    ) -> Result<Self, MetricError> {
        let roc = roc_curve(probs, labels)?;
        let pr = pr_curve(probs, labels)?;
        Ok(RunMetrics {
            run,
            auroc: roc.area,
            auprc: pr.area,
            brier: brier_loss(probs, labels)?,
            roc_points: roc.points,
            pr_points: pr.points,
            calibration_bins: calibration_curve(probs, labels, n_bins)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} (standard deviation={:.3})", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ribbon {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub n_runs: usize,
    pub auroc: MeanStd,
    pub auprc: MeanStd,
    pub brier: MeanStd,
    pub roc: Ribbon,
    pub pr: Ribbon,
}

/// Value of a piecewise-linear curve at `x`. Points must be sorted by `x`;
/// where the curve is vertical at `x`, the largest `y` is returned.
pub fn interpolate_upper(points: &[(f64, f64)], x: f64) -> f64 {
    let hi = points.partition_point(|p| p.0 <= x);
    if hi == 0 {
        return points[0].1;
    }
    let (x0, y0) = points[hi - 1];
    if x0 == x || hi == points.len() {
        // take the top of any vertical run ending at x
        return points[..hi]
            .iter()
            .rev()
            .take_while(|p| p.0 == x0)
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max);
    }
    let (x1, y1) = points[hi];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

fn grid() -> Vec<f64> {
    (0..GRID_POINTS)
        .map(|i| i as f64 / (GRID_POINTS - 1) as f64)
        .collect()
}

fn ribbon(curves: &[&[(f64, f64)]]) -> Ribbon {
    let g = grid();
    let mut mean = Vec::with_capacity(g.len());
    let mut std = Vec::with_capacity(g.len());
    for &x in &g {
        let ys: Vec<f64> = curves.iter().map(|c| interpolate_upper(c, x)).collect();
        let ms = MeanStd::of(&ys);
        mean.push(ms.mean);
        std.push(ms.std);
    }
    Ribbon { grid: g, mean, std }
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<AggregateMetrics, MetricError> {
    if runs.len() < 2 {
        return Err(MetricError::InvalidInput("need at least 2 runs".into()));
    }
    let col = |f: fn(&RunMetrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    let rocs: Vec<&[(f64, f64)]> = runs.iter().map(|r| r.roc_points.as_slice()).collect();
    let prs: Vec<&[(f64, f64)]> = runs.iter().map(|r| r.pr_points.as_slice()).collect();
    Ok(AggregateMetrics {
        n_runs: runs.len(),
        auroc: col(|r| r.auroc),
        auprc: col(|r| r.auprc),
        brier: col(|r| r.brier),
        roc: ribbon(&rocs),
        pr: ribbon(&prs),
    })
}

/// Two-sided standard normal quantile for `confidence`.
pub fn z_for(confidence: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - (1.0 - confidence) / 2.0)
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_ci(k: u64, n: u64, confidence: f64) -> Result<(f64, f64), MetricError> {
    if n == 0 {
        return Err(MetricError::UndefinedRate);
    }
    if k > n {
        return Err(MetricError::InvalidInput(format!(
            "{k} successes in {n} trials"
        )));
    }
    if !(0.0 < confidence && confidence < 1.0) {
        return Err(MetricError::InvalidInput(
            "confidence must be in (0, 1)".into(),
        ));
    }
    let z = z_for(confidence);
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let low = if k == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let high = if k == n {
        1.0
    } else {
        (center + half).min(1.0)
    };
    Ok((low, high))
}

/// Point estimate with its Wilson 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub k: u64,
    pub n: u64,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Proportion {
    pub fn new(k: u64, n: u64) -> Result<Self, MetricError> {
        let (ci_low, ci_high) = wilson_ci(k, n, 0.95)?;
        Ok(Proportion {
            k,
            n,
            point: k as f64 / n as f64,
            ci_low,
            ci_high,
        })
    }

    pub fn contains(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(MetricError::InvalidInput(
            "need two equal-length samples of size >= 2".into(),
        ));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::UndefinedMetric("zero rank variance"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_examples() {
        let s = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(
            roc_curve(&s, &[true, true, false, false]).unwrap().area,
            1.0
        );
        // positives {0.9, 0.1}, negatives {0.8, 0.2}: 0.9 beats both, 0.1 neither
        assert_eq!(
            roc_curve(&s, &[true, false, false, true]).unwrap().area,
            0.5
        );
        let c = roc_curve(&s, &[true, false, false, true]).unwrap();
        assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
        assert_eq!(
            roc_curve(&[0.5, 0.5], &[true, true]),
            Err(MetricError::UndefinedMetric("ROC needs both classes"))
        );
    }

    #[test]
    fn roc_ties_count_half() {
        let c = roc_curve(&[0.5, 0.5, 0.5], &[true, false, false]).unwrap();
        assert_eq!(c.area, 0.5);
    }

    #[test]
    fn pr_examples() {
        let s = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(pr_curve(&s, &[true, true, false, false]).unwrap().area, 1.0);
        let c = pr_curve(
            &[0.3; 8],
            &[true, false, false, false, true, false, false, false],
        )
        .unwrap();
        assert_eq!(c.area, 0.25);
        assert!(pr_curve(&s, &[false; 4]).is_err());
    }

    #[test]
    fn brier_examples() {
        let y = [true, false, true, true];
        assert_eq!(brier_loss(&[0.5; 4], &y).unwrap(), 0.25);
        assert_eq!(brier_loss(&[1.0, 0.0, 1.0, 1.0], &y).unwrap(), 0.0);
        // constant prevalence p = 3/4 gives p(1 - p)
        let b = brier_loss(&[0.75; 4], &y).unwrap();
        assert!((b - 0.75 * 0.25).abs() < 1e-15);
        assert!(brier_loss(&[1.5; 4], &y).is_err());
    }

    #[test]
    fn calibration_examples() {
        let bins = calibration_curve(&[0.5; 4], &[true, false, true, false], 10).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!((bins[0].mean_predicted, bins[0].observed_rate), (0.5, 0.5));
        let bins = calibration_curve(&[0.0, 1.0, 1.0], &[false, true, true], 10).unwrap();
        assert_eq!(bins.len(), 2);
        assert_eq!((bins[0].mean_predicted, bins[0].observed_rate), (0.0, 0.0));
        assert_eq!((bins[1].mean_predicted, bins[1].observed_rate), (1.0, 1.0));
        assert!(calibration_curve(&[0.5], &[true], 1).is_err());
    }

    fn run(auroc: f64) -> RunMetrics {
        RunMetrics {
            run: 0,
            auroc,
            auprc: 0.3,
            brier: 0.1,
            roc_points: vec![(0.0, 0.0), (0.5, 0.8), (1.0, 1.0)],
            pr_points: vec![(0.0, 1.0), (0.5, 0.5), (1.0, 0.2)],
            calibration_bins: vec![],
        }
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate_runs(&[run(0.7), run(0.7)]).unwrap();
        assert_eq!(a.auroc.std, 0.0);
        assert_eq!(a.auprc.std, 0.0);
        assert!(a.roc.std.iter().all(|&s| s == 0.0));
        assert_eq!(a.roc.grid.len(), GRID_POINTS);
        assert!((a.roc.mean[50] - 0.8).abs() < 1e-12);
        let a = aggregate_runs(&[run(0.7), run(0.8)]).unwrap();
        assert!((a.auroc.mean - 0.75).abs() < 1e-12);
        assert!((a.auroc.std - 0.005f64.sqrt()).abs() < 1e-12);
        assert_eq!(
            format!(
                "{}",
                MeanStd {
                    mean: 0.731,
                    std: 0.004
                }
            ),
            "0.731 (standard deviation=0.004)"
        );
        assert!(aggregate_runs(&[run(0.7)]).is_err());
    }

    #[test]
    fn interpolation_takes_top_of_vertical_runs() {
        let pts = [(0.0, 0.0), (0.0, 0.4), (0.5, 0.6), (0.5, 0.9), (1.0, 1.0)];
        assert_eq!(interpolate_upper(&pts, 0.0), 0.4);
        assert_eq!(interpolate_upper(&pts, 0.5), 0.9);
        assert!((interpolate_upper(&pts, 0.25) - 0.5).abs() < 1e-12);
        assert!((interpolate_upper(&pts, 0.75) - 0.95).abs() < 1e-12);
        assert_eq!(interpolate_upper(&pts, 1.0), 1.0);
    }

    #[test]
    fn wilson_examples() {
        let (lo, _) = wilson_ci(0, 10, 0.95).unwrap();
        assert_eq!(lo, 0.0);
        let (lo, hi) = wilson_ci(1, 2, 0.95).unwrap();
        assert!((lo - 0.0946).abs() < 5e-4, "{lo}");
        assert!((hi - 0.9054).abs() < 5e-4, "{hi}");
        let (_, hi) = wilson_ci(7, 7, 0.95).unwrap();
        assert_eq!(hi, 1.0);
        assert_eq!(wilson_ci(0, 0, 0.95), Err(MetricError::UndefinedRate));
        assert!((z_for(0.95) - 1.959963984540054).abs() < 1e-9);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman_rho(&x, &[2.0, 5.0, 7.0, 9.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_rho(&x, &[9.0, 5.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // 1 - 6 * 2 / (4 * 15)
        assert!((spearman_rho(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(spearman_rho(&x, &[1.0; 4]).is_err());
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0]), vec![1.5, 3.0, 1.5]);
    }
}
