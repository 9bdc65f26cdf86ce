use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{substream, LearnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Tune,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Tune => "tune",
            Partition::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Partition> {
        match s {
            "train" => Some(Partition::Train),
            "tune" => Some(Partition::Tune),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }
}

/// Per-run assignment of whole patients to train / tune / test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n_runs: usize,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    pub assignments: Vec<BTreeMap<String, Partition>>,
}

impl SplitPlan {
    pub fn partition_of(&self, run: usize, patient_id: &str) -> Option<Partition> {
        self.assignments[run].get(patient_id).copied()
    }

    /// Row indices of `patient_ids` (one entry per row) falling in `part`.
    pub fn rows(&self, run: usize, patient_ids: &[String], part: Partition) -> Vec<usize> {
        patient_ids
            .iter()
            .enumerate()
            .filter(|(_, p)| self.partition_of(run, p) == Some(part))
            .map(|(i, _)| i)
            .collect()
    }
}

const SPLIT_STREAM: u64 = 0x5b1;

fn sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let train = ((ratios.0 * n as f64).round() as usize).min(n);
    let tune = ((ratios.1 * n as f64).round() as usize).min(n - train);
    (train, tune, n - train - tune)
}

/// `n_runs` independent shuffles of the distinct patients, each cut into
/// partitions whose sizes are the rounded ratios.
pub fn split_monte_carlo(
    patient_ids: &[String],
    n_runs: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitPlan, LearnError> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(r.is_finite() && *r > 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(LearnError::BadRatios(format!("{a}:{b}:{c}")));
    }
    if n_runs == 0 {
        return Err(LearnError::InvalidInput("need at least one run".into()));
    }
    let mut ids: Vec<&String> = patient_ids.iter().collect();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    let (n_train, n_tune, n_test) = sizes(n, ratios);
    if n < 10 || n_train == 0 || n_tune == 0 || n_test == 0 {
        return Err(LearnError::InsufficientPatients { needed: 10, got: n });
    }
    let assignments = (0..n_runs)
        .map(|run| {
            let mut rng = substream(seed, &[SPLIT_STREAM, run as u64]);
            let mut order = ids.clone();
            order.shuffle(&mut rng);
            order
                .into_iter()
                .enumerate()
                .map(|(i, id)| {
                    let part = if i < n_train {
                        Partition::Train
                    } else if i < n_train + n_tune {
                        Partition::Tune
                    } else {
                        Partition::Test
                    };
                    (id.clone(), part)
                })
                .collect()
        })
        .collect();
    Ok(SplitPlan {
        n_runs,
        ratios,
        seed,
        assignments,
    })
}
