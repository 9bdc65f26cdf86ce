//! Predicting ferritin orders from complete blood counts and lab history.
//!
//! The crate covers the whole workflow: CSV ingest, CBC-event cohorts with
//! ferritin labels, historical feature aggregation, the fixed reflex rules,
//! logistic and random-forest learners with grouped Monte-Carlo splits,
//! evaluation and analyses, and a synthetic data generator with known ground
//! truth.

pub mod analysis;
pub mod cohort;
pub mod domain;
pub mod featurize;
pub mod ingest;
pub mod learn;
pub mod metrics;
pub mod pipeline;
pub mod rules;
pub mod synth;
