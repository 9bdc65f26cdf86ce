//! Grid evaluation on the tuning partition.
//!
//! Logistic candidates are fitted from the strongest penalty down, each
//! warm-started from the previous fit. Forest candidates that differ only in
//! `n_trees` share one forest: the smaller forests are prefixes of the
//! largest, since tree `t` always draws from the same RNG stream.

use std::cmp::Ordering;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forest::{check_labels, train_on_binned, BinnedData};
use super::logistic::train_logistic;
use super::{ForestParams, LearnError, LogisticModel, ModelArtifact, ModelPayload, TrainingMeta};
use crate::featurize::{FeatureSchema, ScalerStats};
use crate::metrics::{pr_curve, roc_curve};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Candidate {
    Logistic { l2: f64 },
    Forest(ForestParams),
}

impl Candidate {
    pub fn kind(&self) -> &'static str {
        match self {
            Candidate::Logistic { .. } => "logistic",
            Candidate::Forest(_) => "forest",
        }
    }

    pub fn label(&self) -> String {
        match self {
            Candidate::Logistic { l2 } => format!("logistic(l2={l2})"),
            Candidate::Forest(p) => format!(
                "forest(n_trees={}, max_depth={}, min_samples_leaf={})",
                p.n_trees,
                p.max_depth.map_or("none".to_string(), |d| d.to_string()),
                p.min_samples_leaf
            ),
        }
    }

    /// Tie-break order: logistic before forest, then smaller capacity.
    fn simplicity_cmp(&self, other: &Candidate) -> Ordering {
        match (self, other) {
            (Candidate::Logistic { l2: a }, Candidate::Logistic { l2: b }) => b.total_cmp(a),
            (Candidate::Logistic { .. }, Candidate::Forest(_)) => Ordering::Less,
            (Candidate::Forest(_), Candidate::Logistic { .. }) => Ordering::Greater,
            (Candidate::Forest(a), Candidate::Forest(b)) => {
                let depth = |p: &ForestParams| p.max_depth.unwrap_or(usize::MAX);
                depth(a)
                    .cmp(&depth(b))
                    .then(b.min_samples_leaf.cmp(&a.min_samples_leaf))
                    .then(a.n_trees.cmp(&b.n_trees))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TuningMetric {
    #[default]
    Auroc,
    Auprc,
}

impl TuningMetric {
    fn score(self, probs: &[f64], labels: &[bool]) -> Result<f64, LearnError> {
        Ok(match self {
            TuningMetric::Auroc => roc_curve(probs, labels)?.area,
            TuningMetric::Auprc => pr_curve(probs, labels)?.area,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGrid {
    pub candidates: Vec<Candidate>,
}

impl ModelGrid {
    /// Cartesian product: every `l2`, then every forest combination.
    pub fn product(
        l2: &[f64],
        n_trees: &[usize],
        max_depth: &[Option<usize>],
        min_samples_leaf: &[usize],
    ) -> Self {
        let mut candidates: Vec<Candidate> =
            l2.iter().map(|&l2| Candidate::Logistic { l2 }).collect();
        for &n in n_trees {
            for &depth in max_depth {
                for &leaf in min_samples_leaf {
                    candidates.push(Candidate::Forest(ForestParams {
                        n_trees: n,
                        max_depth: depth,
                        min_samples_leaf: leaf,
                        features_per_split: None,
                        bootstrap: true,
                    }));
                }
            }
        }
        ModelGrid { candidates }
    }
}

impl Default for ModelGrid {
    fn default() -> Self {
        ModelGrid::product(
            &[1e-4, 1e-3, 1e-2, 1e-1],
            &[100, 300],
            &[Some(8), Some(16), None],
            &[1, 10, 50],
        )
    }
}

/// Scaled, row-major training and tuning matrices.
pub struct TuneData<'a> {
    pub d: usize,
    pub x_train: &'a [f64],
    pub y_train: &'a [bool],
    pub x_tune: &'a [f64],
    pub y_tune: &'a [bool],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub candidate: Candidate,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    /// The selected model over the whole grid.
    pub chosen: ModelArtifact,
    /// Best model of each kind present in the grid.
    pub best_logistic: Option<ModelArtifact>,
    pub best_forest: Option<ModelArtifact>,
    /// Tuning scores in grid order.
    pub scores: Vec<CandidateScore>,
}

fn better(a: &CandidateScore, b: &CandidateScore) -> bool {
    match a.value.total_cmp(&b.value) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => {
            a.candidate
                .simplicity_cmp(&b.candidate)
                .then(a.index.cmp(&b.index))
                == Ordering::Less
        }
    }
}

pub struct TuneSettings<'a> {
    pub schema: &'a FeatureSchema,
    pub scaler: &'a ScalerStats,
    pub metric: TuningMetric,
    pub seed: u64,
    pub run: usize,
}

/// Fits every candidate on the training rows and keeps the one with the best
/// tuning-partition metric.
pub fn tune(
    grid: &ModelGrid,
    data: &TuneData,
    settings: &TuneSettings,
) -> Result<TuneOutcome, LearnError> {
    if grid.candidates.is_empty() {
        return Err(LearnError::EmptyGrid);
    }
    let d = data.d;
    let n_train = data.y_train.len();
    let n_tune = data.y_tune.len();
    if data.x_train.len() != n_train * d || data.x_tune.len() != n_tune * d || n_tune == 0 {
        return Err(LearnError::InvalidInput("tuning matrices".into()));
    }
    check_labels(data.y_train)?;
    let mut scores: Vec<Option<CandidateScore>> = vec![None; grid.candidates.len()];
    let mut best_logistic: Option<(CandidateScore, LogisticModel)> = None;
    let mut best_forest: Option<(CandidateScore, super::ForestModel)> = None;
    let record = |index: usize, value: f64| CandidateScore {
        index,
        candidate: grid.candidates[index].clone(),
        value,
    };

    // logistic: strongest penalty first, warm-started
    let mut logistic_idx: Vec<(usize, f64)> = grid
        .candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| match c {
            Candidate::Logistic { l2 } => Some((i, *l2)),
            _ => None,
        })
        .collect();
    logistic_idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut warm: Option<LogisticModel> = None;
    for (i, l2) in logistic_idx {
        let fit = train_logistic(data.x_train, d, data.y_train, l2, warm.as_ref())?;
        let probs: Vec<f64> = data
            .x_tune
            .chunks(d.max(1))
            .map(|row| fit.model.predict(row))
            .collect();
        let s = record(i, settings.metric.score(&probs, data.y_tune)?);
        debug!(
            "run {} {}: {:.5} ({} iterations, converged={})",
            settings.run,
            s.candidate.label(),
            s.value,
            fit.iterations,
            fit.converged
        );
        if best_logistic.as_ref().map_or(true, |(b, _)| better(&s, b)) {
            best_logistic = Some((s.clone(), fit.model.clone()));
        }
        scores[i] = Some(s);
        warm = Some(fit.model);
    }

    // forest: group by everything except n_trees
    let mut groups: Vec<(ForestParams, Vec<usize>)> = Vec::new();
    for (i, c) in grid.candidates.iter().enumerate() {
        if let Candidate::Forest(p) = c {
            let key = ForestParams {
                n_trees: 0,
                ..p.clone()
            };
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, members)) => members.push(i),
                None => groups.push((key, vec![i])),
            }
        }
    }
    if !groups.is_empty() {
        let binned = BinnedData::new(data.x_train, d, n_train);
        for (key, members) in groups {
            let max_trees = members
                .iter()
                .map(|&i| match &grid.candidates[i] {
                    Candidate::Forest(p) => p.n_trees,
                    _ => unreachable!(),
                })
                .max()
                .unwrap_or(0);
            let params = ForestParams {
                n_trees: max_trees,
                ..key
            };
            let forest = train_on_binned(
                &binned,
                d,
                data.y_train,
                &params,
                settings.seed,
                &[settings.run as u64],
            )?;
            // per-row running sums over trees, in tree order
            let per_tree: Vec<Vec<f64>> = data
                .x_tune
                .par_chunks(d.max(1))
                .map(|row| forest.trees.iter().map(|t| t.predict(row)).collect())
                .collect();
            for &i in &members {
                let Candidate::Forest(p) = &grid.candidates[i] else {
                    unreachable!()
                };
                let k = p.n_trees;
                let probs: Vec<f64> = per_tree
                    .iter()
                    .map(|v| (v[..k].iter().sum::<f64>() / k as f64).clamp(0.0, 1.0))
                    .collect();
                let s = record(i, settings.metric.score(&probs, data.y_tune)?);
                debug!(
                    "run {} {}: {:.5}",
                    settings.run,
                    s.candidate.label(),
                    s.value
                );
                if best_forest.as_ref().map_or(true, |(b, _)| better(&s, b)) {
                    let mut f = forest.truncated(k);
                    f.params = p.clone();
                    best_forest = Some((s.clone(), f));
                }
                scores[i] = Some(s);
            }
        }
    }

    let make = |s: &CandidateScore, model: ModelPayload| {
        ModelArtifact::new(
            settings.schema.clone(),
            settings.scaler.clone(),
            model,
            TrainingMeta {
                run: settings.run,
                seed: settings.seed,
                candidate: s.candidate.clone(),
                tuning_metric: settings.metric,
                tuning_value: s.value,
                n_train_rows: n_train,
                n_tune_rows: n_tune,
            },
        )
    };
    let best_logistic =
        best_logistic.map(|(s, m)| (s.clone(), make(&s, ModelPayload::Logistic(m))));
    let best_forest = best_forest.map(|(s, m)| (s.clone(), make(&s, ModelPayload::Forest(m))));
    let chosen = match (&best_logistic, &best_forest) {
        (Some((ls, la)), Some((fs, fa))) => {
            if better(fs, ls) {
                fa.clone()
            } else {
                la.clone()
            }
        }
        (Some((_, a)), None) | (None, Some((_, a))) => a.clone(),
        (None, None) => return Err(LearnError::EmptyGrid),
    };
    Ok(TuneOutcome {
        chosen,
        best_logistic: best_logistic.map(|(_, a)| a),
        best_forest: best_forest.map(|(_, a)| a),
        scores: scores
            .into_iter()
            .map(|s| s.expect("every candidate scored"))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n * 3);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            x.extend([a, b, rng.gen_range(-1.0..1.0)]);
            // interaction the linear model cannot express
            y.push(rng.gen_bool(if a * b > 0.0 { 0.85 } else { 0.15 }));
        }
        (x, y)
    }

    fn setup() -> (FeatureSchema, ScalerStats) {
        let schema = FeatureSchema::new(true);
        let d = schema.len();
        let scaler = ScalerStats {
            schema_version: schema.version.clone(),
            fill: vec![0.0; d],
            mean: vec![0.0; d],
            std: vec![1.0; d],
        };
        (schema, scaler)
    }

    fn run_grid(grid: &ModelGrid) -> TuneOutcome {
        let (xt, yt) = toy(600, 1);
        let (xv, yv) = toy(300, 2);
        let (schema, scaler) = setup();
        let data = TuneData {
            d: 3,
            x_train: &xt,
            y_train: &yt,
            x_tune: &xv,
            y_tune: &yv,
        };
        let settings = TuneSettings {
            schema: &schema,
            scaler: &scaler,
            metric: TuningMetric::Auroc,
            seed: 7,
            run: 0,
        };
        tune(grid, &data, &settings).unwrap()
    }

    #[test]
    fn single_candidate_is_returned() {
        let grid = ModelGrid {
            candidates: vec![Candidate::Logistic { l2: 0.1 }],
        };
        let out = run_grid(&grid);
        assert_eq!(out.chosen.meta.candidate, grid.candidates[0]);
        assert!(out.best_forest.is_none());
    }

    #[test]
    fn argmax_picks_forest_on_interaction() {
        let grid = ModelGrid::product(&[0.01, 0.1], &[10, 30], &[Some(4)], &[5]);
        let out = run_grid(&grid);
        assert_eq!(out.chosen.kind(), "forest");
        let best = out
            .scores
            .iter()
            .map(|s| s.value)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.chosen.meta.tuning_value, best);
        assert_eq!(out.scores.len(), 4);
    }

    #[test]
    fn prefix_forest_matches_direct_training() {
        let grid = ModelGrid::product(&[], &[5, 12], &[Some(3)], &[5]);
        let out = run_grid(&grid);
        let (xt, yt) = toy(600, 1);
        let (xv, yv) = toy(300, 2);
        let Candidate::Forest(p5) = &grid.candidates[0] else {
            panic!()
        };
        let f5 = super::super::train_forest(&xt, 3, &yt, p5, 7, &[0]).unwrap();
        let probs: Vec<f64> = xv.chunks(3).map(|r| f5.predict(r)).collect();
        assert_eq!(out.scores[0].value, roc_curve(&probs, &yv).unwrap().area);
    }

    #[test]
    fn ties_prefer_simpler_candidates() {
        let l = |l2| Candidate::Logistic { l2 };
        let f = |depth: Option<usize>, leaf, n| {
            Candidate::Forest(ForestParams {
                n_trees: n,
                max_depth: depth,
                min_samples_leaf: leaf,
                features_per_split: None,
                bootstrap: true,
            })
        };
        let s = |index, candidate| CandidateScore {
            index,
            candidate,
            value: 0.7,
        };
        assert!(better(&s(5, l(0.1)), &s(0, f(Some(2), 50, 10))));
        assert!(better(&s(3, l(0.1)), &s(0, l(0.01))));
        assert!(better(&s(3, f(Some(8), 1, 300)), &s(0, f(None, 50, 100))));
        assert!(better(
            &s(3, f(Some(8), 50, 300)),
            &s(0, f(Some(8), 10, 100))
        ));
        assert!(better(
            &s(3, f(Some(8), 50, 100)),
            &s(0, f(Some(8), 50, 300))
        ));
        assert!(better(&s(0, l(0.1)), &s(1, l(0.1))));
        let mut hi = s(9, f(None, 1, 300));
        hi.value = 0.71;
        assert!(better(&hi, &s(0, l(0.1))));
    }

    #[test]
    fn identical_inputs_give_identical_artifacts() {
        let grid = ModelGrid::product(&[0.01], &[8], &[Some(4)], &[5]);
        let a = run_grid(&grid);
        let b = run_grid(&grid);
        assert_eq!(a.chosen.to_json().unwrap(), b.chosen.to_json().unwrap());
    }

    #[test]
    fn empty_grid_is_an_error() {
        let (schema, scaler) = setup();
        let data = TuneData {
            d: 1,
            x_train: &[0.0, 1.0],
            y_train: &[false, true],
            x_tune: &[0.0],
            y_tune: &[true],
        };
        let settings = TuneSettings {
            schema: &schema,
            scaler: &scaler,
            metric: TuningMetric::Auroc,
            seed: 0,
            run: 0,
        };
        assert!(matches!(
            tune(&ModelGrid { candidates: vec![] }, &data, &settings),
            Err(LearnError::EmptyGrid)
        ));
    }
}
