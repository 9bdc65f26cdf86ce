//! Patient-grouped Monte-Carlo splitting, the two learners, model selection
//! and the persisted model artifact.

mod artifact;
mod forest;
mod logistic;
mod split;
mod tune;

pub use artifact::{ModelArtifact, ModelPayload, TrainingMeta, ARTIFACT_VERSION};
pub use forest::{
    feature_importance, train_forest, FeatureImportance, ForestModel, ForestParams, Tree,
};
pub use logistic::{objective_and_gradient, sigmoid, train_logistic, LogisticFit, LogisticModel};
pub use split::{split_monte_carlo, Partition, SplitPlan};
pub use tune::{
    tune, Candidate, CandidateScore, ModelGrid, TuneData, TuneOutcome, TuneSettings, TuningMetric,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::featurize::FeatureError;
use crate::metrics::MetricError;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("need at least {needed} patients, got {got}")]
    InsufficientPatients { needed: usize, got: usize },
    #[error("invalid split ratios: {0}")]
    BadRatios(String),
    #[error("loss became non-finite at iteration {0}")]
    Divergence(usize),
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("empty candidate grid")]
    EmptyGrid,
    #[error("unsupported model artifact version `{0}`")]
    UnknownArtifactVersion(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream keyed by `(seed, keys...)`, so that work items get
/// the same stream regardless of scheduling.
pub fn substream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &k in keys {
        h = splitmix(h ^ splitmix(k));
    }
    ChaCha8Rng::seed_from_u64(h)
}
