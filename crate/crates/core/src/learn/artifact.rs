use serde::{Deserialize, Serialize};

use super::{Candidate, ForestModel, LearnError, LogisticModel, TuningMetric};
use crate::featurize::{FeatureError, FeatureSchema, FeatureVector, ScalerStats};

pub const ARTIFACT_VERSION: &str = "reflex-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelPayload {
    Logistic(LogisticModel),
    Forest(ForestModel),
}

impl ModelPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelPayload::Logistic(_) => "logistic",
            ModelPayload::Forest(_) => "forest",
        }
    }

    /// Probability for an already scaled row.
    pub fn predict_scaled(&self, x: &[f64]) -> f64 {
        match self {
            ModelPayload::Logistic(m) => m.predict(x),
            ModelPayload::Forest(f) => f.predict(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub run: usize,
    pub seed: u64,
    pub candidate: Candidate,
    pub tuning_metric: TuningMetric,
    pub tuning_value: f64,
    pub n_train_rows: usize,
    pub n_tune_rows: usize,
}

/// A trained model with everything needed to score a raw feature row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub version: String,
    pub schema: FeatureSchema,
    pub scaler: ScalerStats,
    pub model: ModelPayload,
    pub meta: TrainingMeta,
}

impl ModelArtifact {
    pub fn new(
        schema: FeatureSchema,
        scaler: ScalerStats,
        model: ModelPayload,
        meta: TrainingMeta,
    ) -> Self {
        ModelArtifact {
            version: ARTIFACT_VERSION.to_string(),
            schema,
            scaler,
            model,
            meta,
        }
    }

    pub fn kind(&self) -> &'static str {
        self.model.kind()
    }

    /// Probability for a raw (unimputed, unscaled) row of this schema.
    pub fn predict_proba(&self, raw: &FeatureVector) -> Result<f64, LearnError> {
        self.schema.check(&raw.schema_version)?;
        if raw.values.len() != self.schema.len() {
            return Err(FeatureError::Format(format!(
                "row has {} values, schema has {}",
                raw.values.len(),
                self.schema.len()
            ))
            .into());
        }
        Ok(self.predict_raw_unchecked(&raw.values))
    }

    /// Like [`predict_proba`](Self::predict_proba) for a row already known to
    /// match the schema.
    pub fn predict_raw_unchecked(&self, raw: &[f64]) -> f64 {
        let mut x = vec![0.0; raw.len()];
        self.scaler.transform_into(raw, &mut x);
        self.model.predict_scaled(&x)
    }

    pub fn to_json(&self) -> Result<String, LearnError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, LearnError> {
        #[derive(Deserialize)]
        struct Header {
            version: String,
        }
        let header: Header = serde_json::from_str(s)?;
        if header.version != ARTIFACT_VERSION {
            return Err(LearnError::UnknownArtifactVersion(header.version));
        }
        let artifact: ModelArtifact = serde_json::from_str(s)?;
        artifact.schema.check(&artifact.scaler.schema_version)?;
        let d = artifact.schema.len();
        let consistent = artifact.scaler.fill.len() == d
            && artifact.scaler.mean.len() == d
            && artifact.scaler.std.len() == d
            && match &artifact.model {
                ModelPayload::Logistic(m) => {
                    m.coefficients.len() == d
                        && m.intercept.is_finite()
                        && m.coefficients.iter().all(|c| c.is_finite())
                }
                ModelPayload::Forest(f) => f.n_features == d && f.validate().is_ok(),
            };
        if !consistent {
            return Err(LearnError::InvalidInput(
                "artifact does not match its feature schema".into(),
            ));
        }
        Ok(artifact)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::{raw_row_from_named, SCHEMA_VERSION_NO_STD};

    fn zero_logistic(schema: &FeatureSchema) -> ModelArtifact {
        let d = schema.len();
        ModelArtifact::new(
            schema.clone(),
            ScalerStats {
                schema_version: schema.version.clone(),
                fill: vec![0.0; d],
                mean: vec![0.0; d],
                std: vec![1.0; d],
            },
            ModelPayload::Logistic(LogisticModel {
                coefficients: vec![0.0; d],
                intercept: 0.0,
                l2_strength: 0.01,
            }),
            TrainingMeta {
                run: 0,
                seed: 1,
                candidate: Candidate::Logistic { l2: 0.01 },
                tuning_metric: TuningMetric::Auroc,
                tuning_value: 0.5,
                n_train_rows: 8,
                n_tune_rows: 1,
            },
        )
    }

    #[test]
    fn zero_model_predicts_half_and_round_trips() {
        let schema = FeatureSchema::new(true);
        let a = zero_logistic(&schema);
        let row = raw_row_from_named(&schema, [("age", 50.0), ("gender_male", 1.0)]).unwrap();
        assert_eq!(a.predict_proba(&row).unwrap(), 0.5);
        let json = a.to_json().unwrap();
        let back = ModelArtifact::from_json(&json).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn unknown_version_is_refused() {
        let a = zero_logistic(&FeatureSchema::new(true));
        let json = a
            .to_json()
            .unwrap()
            .replace(ARTIFACT_VERSION, "reflex-model/99");
        assert!(matches!(
            ModelArtifact::from_json(&json),
            Err(LearnError::UnknownArtifactVersion(v)) if v == "reflex-model/99"
        ));
    }

    #[test]
    fn schema_mismatch_is_refused() {
        let a = zero_logistic(&FeatureSchema::new(true));
        let other = FeatureSchema::new(false);
        assert_eq!(other.version, SCHEMA_VERSION_NO_STD);
        let row = raw_row_from_named(&other, [("age", 50.0), ("gender_male", 0.0)]).unwrap();
        assert!(matches!(
            a.predict_proba(&row),
            Err(LearnError::Feature(FeatureError::SchemaVersion { .. }))
        ));
    }
}
