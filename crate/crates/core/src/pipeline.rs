//! Stage functions behind the command-line tool, the pipeline configuration
//! and the run manifest.
//!
//! Every stage reads and writes plain files so stages can be run one at a
//! time or chained by [`run_pipeline`].

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{Duration, NaiveDate};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    compare_rules_vs_model, event_probabilities, label_ferritin, mnar_decile_analysis,
    read_predictions, reflex_decide, review_queue, write_predictions, AnalysisError, DecisionMode,
    EventProbability, MnarItem, MnarTable, OperatingPoint, ReflexDecision, ReviewQueue,
    RulesVsModel, TestPrediction,
};
use crate::cohort::{build_cohort, Cohort, CohortError, LabelMode, LabelPolicy, StudyWindow};
use crate::domain::{Catalog, ReferenceRanges};
use crate::featurize::{
    build_matrix, raw_row_from_named, AnchorMode, FeatureError, FeatureMatrix, FeatureSchema,
    FeatureSidecar, ScalerStats,
};
use crate::ingest::{parse_lab_results, Dataset, IngestError, LoadReport, ParseOptions};
use crate::learn::{
    feature_importance, split_monte_carlo, tune, LearnError, ModelArtifact, ModelGrid,
    ModelPayload, Partition, SplitPlan, TuneData, TuneSettings, TuningMetric,
};
use crate::metrics::{aggregate_runs, roc_curve, CalibrationBin, MeanStd, MetricError, RunMetrics};
use crate::rules::{write_rules_report, RuleContext};
use crate::synth::{generate, SynthConfig, SynthError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Cohort,
    Featurize,
    Train,
    Evaluate,
    Config,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Ingest => 1,
            Stage::Cohort => 2,
            Stage::Featurize => 3,
            Stage::Train => 4,
            Stage::Evaluate => 5,
            Stage::Config => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Cohort => "cohort",
            Stage::Featurize => "featurize",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Config => "config",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Featurize(#[from] FeatureError),
    #[error(transparent)]
    Train(#[from] LearnError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("config: {0}")]
    Config(String),
    #[error("{stage:?} stage: {path}: {source}")]
    Io {
        stage: Stage,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{stage:?} stage: {message}")]
    Invalid { stage: Stage, message: String },
}

impl PipelineError {
    pub fn stage(&self) -> Stage {
        match self {
            PipelineError::Ingest(_) | PipelineError::Synth(_) => Stage::Ingest,
            PipelineError::Cohort(_) => Stage::Cohort,
            PipelineError::Featurize(_) => Stage::Featurize,
            PipelineError::Train(_) => Stage::Train,
            PipelineError::Analysis(_) | PipelineError::Metric(_) => Stage::Evaluate,
            PipelineError::Config(_) => Stage::Config,
            PipelineError::Io { stage, .. } | PipelineError::Invalid { stage, .. } => *stage,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.stage().exit_code()
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn open(stage: Stage, path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| PipelineError::Io {
            stage,
            path: path.to_path_buf(),
            source,
        })
}

fn create(stage: Stage, path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
                stage,
                path: dir.to_path_buf(),
                source,
            })?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| PipelineError::Io {
            stage,
            path: path.to_path_buf(),
            source,
        })
}

fn io_err(stage: Stage, path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        stage,
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(stage: Stage, path: &Path, value: &T) -> Result<()> {
    let mut w = create(stage, path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| PipelineError::Invalid {
        stage,
        message: e.to_string(),
    })?;
    w.write_all(b"\n").map_err(io_err(stage, path))?;
    w.flush().map_err(io_err(stage, path))
}

fn read_to_string(stage: Stage, path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(stage, path))
}

pub const COHORT_FILE: &str = "cohort.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const FEATURES_SCALED_FILE: &str = "features_scaled.csv";
pub const FEATURES_SIDECAR_FILE: &str = "features.json";
pub const SPLITS_FILE: &str = "splits.csv";
pub const TUNING_FILE: &str = "tuning.csv";
pub const PREDICTIONS_FILE: &str = "test_predictions.csv";
pub const IMPORTANCE_FILE: &str = "importance.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const FIGURE4_FILE: &str = "figure4.csv";
pub const RULES_REPORT_FILE: &str = "rules_report.csv";
pub const MNAR_FILE: &str = "mnar.csv";
pub const REVIEW_QUEUE_FILE: &str = "review_queue.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn artifact_file(run: usize) -> String {
    format!("run_{run:02}.json")
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub patients: Option<PathBuf>,
    pub labs: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub study_start: NaiveDate,
    pub study_end: NaiveDate,
    pub policy: LabelMode,
    pub post_window_days: i64,
    pub pre_window_minutes: i64,
}

impl Default for CohortSection {
    fn default() -> Self {
        CohortSection {
            study_start: NaiveDate::from_ymd_opt(2021, 1, 1).expect("valid date"),
            study_end: NaiveDate::from_ymd_opt(2021, 12, 31).expect("valid date"),
            policy: LabelMode::Primary,
            post_window_days: 30,
            pre_window_minutes: 60,
        }
    }
}

impl CohortSection {
    pub fn window(&self) -> Result<StudyWindow> {
        Ok(StudyWindow::new(self.study_start, self.study_end)?)
    }

    pub fn label_policy(&self) -> LabelPolicy {
        LabelPolicy {
            mode: self.policy,
            post_window: Duration::days(self.post_window_days),
            pre_window: Duration::minutes(self.pre_window_minutes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    pub anchor: AnchorMode,
    pub drop_std: bool,
    pub no_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: [f64; 3],
    pub n_runs: usize,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            ratios: [0.8, 0.1, 0.1],
            n_runs: 10,
            seed: 1,
        }
    }
}

/// Candidate lists; a `max_depth` of 0 means unlimited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub l2: Vec<f64>,
    pub n_trees: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub min_samples_leaf: Vec<usize>,
    pub tuning_metric: TuningMetric,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            l2: vec![1e-4, 1e-3, 1e-2, 1e-1],
            n_trees: vec![100, 300],
            max_depth: vec![8, 16, 0],
            min_samples_leaf: vec![1, 10, 50],
            tuning_metric: TuningMetric::Auroc,
        }
    }
}

impl GridSection {
    pub fn grid(&self) -> ModelGrid {
        let depths: Vec<Option<usize>> = self
            .max_depth
            .iter()
            .map(|&d| if d == 0 { None } else { Some(d) })
            .collect();
        ModelGrid::product(&self.l2, &self.n_trees, &depths, &self.min_samples_leaf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub calibration_bins: usize,
    pub random_control_seed: u64,
    pub review_k: usize,
    pub review_m: usize,
    pub review_runs: usize,
    pub review_seed: u64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            calibration_bins: 10,
            random_control_seed: 1,
            review_k: 200,
            review_m: 20,
            review_runs: 3,
            review_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecideSection {
    pub variation1_threshold: f64,
    pub variation2_threshold: f64,
}

impl Default for DecideSection {
    fn default() -> Self {
        DecideSection {
            variation1_threshold: DecisionMode::Variation1Cancel.default_threshold(),
            variation2_threshold: DecisionMode::Variation2Add.default_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub strict: bool,
}

/// Pipeline settings, read from a sectioned `key = value` (TOML) file.
/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsSection,
    /// When present, data are generated into `<out_dir>/data` first.
    pub synth: Option<SynthConfig>,
    pub ingest: IngestSection,
    pub cohort: CohortSection,
    pub features: FeaturesSection,
    pub split: SplitSection,
    pub grid: GridSection,
    pub evaluate: EvaluateSection,
    pub decide: DecideSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.out_dir);
        if let Some(p) = cfg.paths.patients.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.paths.labs.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let [a, b, c] = self.split.ratios;
        if [a, b, c].iter().any(|r| !(*r > 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return bad(format!(
                "split ratios {a}:{b}:{c} must be positive and sum to 1"
            ));
        }
        if self.split.n_runs == 0 {
            return bad("split.n_runs must be positive".into());
        }
        if self.grid.grid().candidates.is_empty() {
            return bad("model grid is empty".into());
        }
        if self.evaluate.calibration_bins < 2 {
            return bad("evaluate.calibration_bins must be at least 2".into());
        }
        for t in [
            self.decide.variation1_threshold,
            self.decide.variation2_threshold,
        ] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("threshold {t} outside [0, 1]"));
            }
        }
        if self.cohort.study_end < self.cohort.study_start {
            return bad("cohort.study_end before study_start".into());
        }
        if self.cohort.post_window_days <= 0 || self.cohort.pre_window_minutes <= 0 {
            return bad("label windows must be positive".into());
        }
        if let Some(s) = &self.synth {
            s.validate()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        } else {
            // missing files are reported by the ingest stage
            for (name, p) in [
                ("patients", &self.paths.patients),
                ("labs", &self.paths.labs),
            ] {
                if p.is_none() {
                    return bad(format!("paths.{name} is required without [synth]"));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- stages

pub fn load_dataset(patients: &Path, labs: &Path, strict: bool) -> Result<(Dataset, LoadReport)> {
    let (dataset, report) = Dataset::load(
        open(Stage::Ingest, patients)?,
        open(Stage::Ingest, labs)?,
        &Catalog::default(),
        ParseOptions { strict },
    )?;
    info!(
        "ingest: {} patients, {} of {} lab rows accepted",
        dataset.patients.len(),
        report.labs.rows_accepted,
        report.labs.rows_read
    );
    Ok((dataset, report))
}

/// Lab results alone, enough for featurizing and rule evaluation.
pub fn load_labs(labs: &Path, strict: bool) -> Result<Dataset> {
    let (results, _) = parse_lab_results(
        open(Stage::Ingest, labs)?,
        &Catalog::default(),
        ParseOptions { strict },
    )?;
    Ok(Dataset::from_results(results))
}

pub fn build_cohort_stage(
    dataset: &Dataset,
    window: StudyWindow,
    policy: LabelPolicy,
    out: &Path,
) -> Result<Cohort> {
    let cohort = build_cohort(dataset, window, policy)?;
    let mut w = create(Stage::Cohort, out)?;
    cohort.write_csv(&mut w)?;
    w.flush().map_err(io_err(Stage::Cohort, out))?;
    info!(
        "cohort: {} events, {} patients, positive rate {:.4}",
        cohort.stats.n_events, cohort.stats.n_patients, cohort.stats.positive_rate
    );
    Ok(cohort)
}

pub fn read_cohort(path: &Path, policy: LabelPolicy) -> Result<Cohort> {
    Ok(Cohort::read_csv(open(Stage::Cohort, path)?, policy)?)
}

pub struct FeaturizeOptions {
    pub anchor: AnchorMode,
    pub drop_std: bool,
    pub no_scale: bool,
}

/// Writes the raw matrix (empty cells are imputed later), its sidecar and,
/// unless disabled, a copy scaled with statistics of all rows.
pub fn featurize_stage(
    cohort: &Cohort,
    dataset: &Dataset,
    opts: &FeaturizeOptions,
    out_dir: &Path,
) -> Result<FeatureMatrix> {
    let schema = FeatureSchema::new(!opts.drop_std);
    let matrix = build_matrix(cohort, dataset, &schema, opts.anchor);
    let all: Vec<usize> = (0..matrix.n_rows()).collect();
    let scaler = ScalerStats::fit(&matrix, &all)?;
    let path = out_dir.join(FEATURES_FILE);
    let mut w = create(Stage::Featurize, &path)?;
    matrix.write_csv(&mut w)?;
    w.flush().map_err(io_err(Stage::Featurize, &path))?;
    let sidecar = FeatureSidecar {
        schema: schema.clone(),
        anchor_mode: opts.anchor,
        n_rows: matrix.n_rows(),
        n_positive: matrix.labels.iter().filter(|&&l| l).count(),
        scaler: scaler.clone(),
    };
    write_json(
        Stage::Featurize,
        &out_dir.join(FEATURES_SIDECAR_FILE),
        &sidecar,
    )?;
    if !opts.no_scale {
        let data = scaler.transform_rows(&matrix, &all);
        let scaled = FeatureMatrix::new(
            schema,
            matrix.event_ids.clone(),
            matrix.patient_ids.clone(),
            matrix.labels.clone(),
            data,
        )?;
        let path = out_dir.join(FEATURES_SCALED_FILE);
        let mut w = create(Stage::Featurize, &path)?;
        scaled.write_csv(&mut w)?;
        w.flush().map_err(io_err(Stage::Featurize, &path))?;
    }
    info!(
        "featurize: {} rows x {} columns",
        matrix.n_rows(),
        matrix.n_cols()
    );
    Ok(matrix)
}

pub fn load_features(dir: &Path) -> Result<(FeatureMatrix, FeatureSidecar)> {
    let sidecar: FeatureSidecar = serde_json::from_str(&read_to_string(
        Stage::Featurize,
        &dir.join(FEATURES_SIDECAR_FILE),
    )?)
    .map_err(FeatureError::from)?;
    let schema = FeatureSchema::from_version(&sidecar.schema.version)?;
    if schema != sidecar.schema {
        return Err(FeatureError::SchemaVersion {
            expected: schema.version,
            found: sidecar.schema.version,
        }
        .into());
    }
    let matrix =
        FeatureMatrix::read_csv(open(Stage::Featurize, &dir.join(FEATURES_FILE))?, schema)?;
    if matrix.n_rows() != sidecar.n_rows {
        return Err(FeatureError::Format("row count differs from features.json".into()).into());
    }
    Ok((matrix, sidecar))
}

pub fn write_splits_csv<W: Write>(plan: &SplitPlan, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let inv = |e: csv::Error| PipelineError::Invalid {
        stage: Stage::Train,
        message: e.to_string(),
    };
    w.write_record(["run", "patient_id", "partition"])
        .map_err(inv)?;
    for (run, a) in plan.assignments.iter().enumerate() {
        for (pid, part) in a {
            w.write_record([run.to_string().as_str(), pid, part.as_str()])
                .map_err(inv)?;
        }
    }
    w.flush().map_err(|e| inv(e.into()))?;
    Ok(())
}

pub fn read_splits_csv<R: Read>(input: R) -> Result<Vec<BTreeMap<String, Partition>>> {
    let bad = |m: String| PipelineError::Invalid {
        stage: Stage::Evaluate,
        message: format!("splits: {m}"),
    };
    let mut r = csv::Reader::from_reader(input);
    let mut runs: Vec<BTreeMap<String, Partition>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let run: usize = rec[0]
            .parse()
            .map_err(|_| bad(format!("run `{}`", &rec[0])))?;
        let part =
            Partition::parse(&rec[2]).ok_or_else(|| bad(format!("partition `{}`", &rec[2])))?;
        if run >= runs.len() {
            runs.resize(run + 1, BTreeMap::new());
        }
        runs[run].insert(rec[1].to_string(), part);
    }
    Ok(runs)
}

/// Patients of the test partition that also appear in training or tuning
/// rows, for every run (empty when the split is clean).
pub fn leaked_patients(plan: &SplitPlan, patient_ids: &[String]) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    for run in 0..plan.n_runs {
        let ids = |part| -> std::collections::BTreeSet<&String> {
            plan.rows(run, patient_ids, part)
                .into_iter()
                .map(|i| &patient_ids[i])
                .collect()
        };
        let test = ids(Partition::Test);
        let seen: std::collections::BTreeSet<&String> = ids(Partition::Train)
            .union(&ids(Partition::Tune))
            .copied()
            .collect();
        out.extend(test.intersection(&seen).map(|p| (run, (*p).clone())));
    }
    out
}

pub struct TrainOptions {
    pub n_runs: usize,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    pub grid: ModelGrid,
    pub metric: TuningMetric,
}

/// Test-partition auROC of the best model of each kind in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindComparison {
    pub run: usize,
    pub chosen: String,
    pub logistic_test_auroc: Option<f64>,
    pub forest_test_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub n_runs: usize,
    pub seed: u64,
    pub runs: Vec<KindComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub run: usize,
    pub rank: usize,
    pub feature: String,
    pub mean: f64,
    pub std: f64,
}

fn test_auroc(artifact: &ModelArtifact, x: &[f64], d: usize, y: &[bool]) -> Result<f64> {
    let probs: Vec<f64> = x
        .chunks(d)
        .map(|r| artifact.model.predict_scaled(r))
        .collect();
    Ok(roc_curve(&probs, y)?.area)
}

/// Splits patients, then per run fits the scaler on training rows only,
/// tunes the grid and saves the selected model with its test predictions.
pub fn train_stage(
    matrix: &FeatureMatrix,
    opts: &TrainOptions,
    out_dir: &Path,
) -> Result<TrainSummary> {
    let plan = split_monte_carlo(&matrix.patient_ids, opts.n_runs, opts.ratios, opts.seed)?;
    let leaks = leaked_patients(&plan, &matrix.patient_ids);
    if !leaks.is_empty() {
        return Err(PipelineError::Invalid {
            stage: Stage::Train,
            message: format!("{} test patients leak into training", leaks.len()),
        });
    }
    let path = out_dir.join(SPLITS_FILE);
    let mut w = create(Stage::Train, &path)?;
    write_splits_csv(&plan, &mut w)?;
    w.flush().map_err(io_err(Stage::Train, &path))?;

    let d = matrix.n_cols();
    let pick = |rows: &[usize]| -> Vec<bool> { rows.iter().map(|&i| matrix.labels[i]).collect() };
    let mut predictions = Vec::new();
    let mut tuning_rows = Vec::new();
    let mut importance = Vec::new();
    let mut comparisons = Vec::new();
    for run in 0..opts.n_runs {
        let started = Instant::now();
        let train = plan.rows(run, &matrix.patient_ids, Partition::Train);
        let tune_rows = plan.rows(run, &matrix.patient_ids, Partition::Tune);
        let test = plan.rows(run, &matrix.patient_ids, Partition::Test);
        let scaler = ScalerStats::fit(matrix, &train)?;
        let x_train = scaler.transform_rows(matrix, &train);
        let x_tune = scaler.transform_rows(matrix, &tune_rows);
        let x_test = scaler.transform_rows(matrix, &test);
        let (y_train, y_tune, y_test) = (pick(&train), pick(&tune_rows), pick(&test));
        let outcome = tune(
            &opts.grid,
            &TuneData {
                d,
                x_train: &x_train,
                y_train: &y_train,
                x_tune: &x_tune,
                y_tune: &y_tune,
            },
            &TuneSettings {
                schema: &matrix.schema,
                scaler: &scaler,
                metric: opts.metric,
                seed: opts.seed,
                run,
            },
        )?;
        let chosen = &outcome.chosen;
        for (k, &row) in test.iter().enumerate() {
            predictions.push(TestPrediction {
                run,
                event_id: matrix.event_ids[row].clone(),
                patient_id: matrix.patient_ids[row].clone(),
                label: matrix.labels[row],
                prob: chosen.model.predict_scaled(&x_test[k * d..(k + 1) * d]),
            });
        }
        for s in &outcome.scores {
            tuning_rows.push((run, s.index, s.candidate.label(), s.value));
        }
        if let Some(ModelPayload::Forest(f)) = outcome.best_forest.as_ref().map(|a| &a.model) {
            for (rank, fi) in feature_importance(f).into_iter().enumerate() {
                importance.push(ImportanceRow {
                    run,
                    rank: rank + 1,
                    feature: matrix.schema.names[fi.feature].clone(),
                    mean: fi.mean,
                    std: fi.std,
                });
            }
        }
        let cmp = KindComparison {
            run,
            chosen: chosen.meta.candidate.label(),
            logistic_test_auroc: outcome
                .best_logistic
                .as_ref()
                .map(|a| test_auroc(a, &x_test, d, &y_test))
                .transpose()?,
            forest_test_auroc: outcome
                .best_forest
                .as_ref()
                .map(|a| test_auroc(a, &x_test, d, &y_test))
                .transpose()?,
        };
        let path = out_dir.join(artifact_file(run));
        let json = chosen.to_json()?;
        std::fs::write(&path, json).map_err(io_err(Stage::Train, &path))?;
        info!(
            "train run {run}: {} (tuning {:.4}; test logistic {:?}, forest {:?}) in {:.1}s",
            cmp.chosen,
            chosen.meta.tuning_value,
            cmp.logistic_test_auroc,
            cmp.forest_test_auroc,
            started.elapsed().as_secs_f64()
        );
        comparisons.push(cmp);
    }

    let path = out_dir.join(PREDICTIONS_FILE);
    let mut w = create(Stage::Train, &path)?;
    write_predictions(&predictions, &mut w)?;
    let path = out_dir.join(TUNING_FILE);
    let mut w = csv::Writer::from_writer(create(Stage::Train, &path)?);
    let inv = |e: csv::Error| PipelineError::Invalid {
        stage: Stage::Train,
        message: e.to_string(),
    };
    w.write_record(["run", "candidate_index", "candidate", "tuning_value"])
        .map_err(inv)?;
    for (run, idx, label, v) in &tuning_rows {
        w.write_record([
            run.to_string(),
            idx.to_string(),
            label.clone(),
            v.to_string(),
        ])
        .map_err(inv)?;
    }
    w.flush().map_err(io_err(Stage::Train, &path))?;
    let path = out_dir.join(IMPORTANCE_FILE);
    let mut w = csv::Writer::from_writer(create(Stage::Train, &path)?);
    w.write_record(["run", "rank", "feature", "mean", "std"])
        .map_err(inv)?;
    for r in &importance {
        w.write_record([
            r.run.to_string(),
            r.rank.to_string(),
            r.feature.clone(),
            r.mean.to_string(),
            r.std.to_string(),
        ])
        .map_err(inv)?;
    }
    w.flush().map_err(io_err(Stage::Train, &path))?;
    let summary = TrainSummary {
        n_runs: opts.n_runs,
        seed: opts.seed,
        runs: comparisons,
    };
    write_json(Stage::Train, &out_dir.join(TRAIN_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub fn read_importance(path: &Path) -> Result<Vec<ImportanceRow>> {
    let mut r = csv::Reader::from_reader(open(Stage::Evaluate, path)?);
    r.deserialize()
        .collect::<std::result::Result<Vec<ImportanceRow>, _>>()
        .map_err(|e| PipelineError::Invalid {
            stage: Stage::Evaluate,
            message: format!("{}: {e}", path.display()),
        })
}

pub fn load_artifact(path: &Path) -> Result<ModelArtifact> {
    Ok(ModelArtifact::from_json(&read_to_string(
        Stage::Evaluate,
        path,
    )?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub model: String,
    pub n_test_events: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub brier: f64,
    pub calibration_bins: Vec<CalibrationBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub auroc: MeanStd,
    pub auprc: MeanStd,
    pub brier: MeanStd,
    /// e.g. `0.731 (standard deviation=0.004)`.
    pub auroc_text: String,
    pub auprc_text: String,
    pub brier_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n_runs: usize,
    pub runs: Vec<RunReport>,
    pub aggregate: MetricSummary,
    /// Best logistic against best forest on the test partition, when the
    /// training summary is available.
    pub kind_comparison: Option<Vec<KindComparison>>,
}

/// Scores every saved model on its run's test partition.
pub fn evaluate_stage(
    models_dir: &Path,
    matrix: &FeatureMatrix,
    n_bins: usize,
    out_dir: &Path,
) -> Result<(Report, Vec<RunMetrics>)> {
    let splits = read_splits_csv(open(Stage::Evaluate, &models_dir.join(SPLITS_FILE))?)?;
    let mut runs = Vec::new();
    let mut metrics = Vec::new();
    for (run, assignment) in splits.iter().enumerate() {
        let artifact = load_artifact(&models_dir.join(artifact_file(run)))?;
        artifact.schema.check(&matrix.schema.version)?;
        let test: Vec<usize> = (0..matrix.n_rows())
            .filter(|&i| assignment.get(&matrix.patient_ids[i]) == Some(&Partition::Test))
            .collect();
        let probs: Vec<f64> = test
            .iter()
            .map(|&i| artifact.predict_raw_unchecked(matrix.row(i)))
            .collect();
        let labels: Vec<bool> = test.iter().map(|&i| matrix.labels[i]).collect();
        let m = RunMetrics::compute(run, &probs, &labels, n_bins)?;
        runs.push(RunReport {
            run,
            model: artifact.meta.candidate.label(),
            n_test_events: test.len(),
            auroc: m.auroc,
            auprc: m.auprc,
            brier: m.brier,
            calibration_bins: m.calibration_bins.clone(),
        });
        metrics.push(m);
    }
    let (auroc, auprc, brier) = if metrics.len() >= 2 {
        let agg = aggregate_runs(&metrics)?;
        let path = out_dir.join(CURVES_FILE);
        let mut w = csv::Writer::from_writer(create(Stage::Evaluate, &path)?);
        let inv = |e: csv::Error| PipelineError::Invalid {
            stage: Stage::Evaluate,
            message: e.to_string(),
        };
        w.write_record(["curve", "x", "mean", "std"]).map_err(inv)?;
        for (name, r) in [("roc", &agg.roc), ("pr", &agg.pr)] {
            for k in 0..r.grid.len() {
                w.write_record([
                    name.to_string(),
                    r.grid[k].to_string(),
                    r.mean[k].to_string(),
                    r.std[k].to_string(),
                ])
                .map_err(inv)?;
            }
        }
        w.flush().map_err(io_err(Stage::Evaluate, &path))?;
        (agg.auroc, agg.auprc, agg.brier)
    } else {
        let one =
            |f: fn(&RunMetrics) -> f64| MeanStd::of(&metrics.iter().map(f).collect::<Vec<_>>());
        (one(|m| m.auroc), one(|m| m.auprc), one(|m| m.brier))
    };
    let path = out_dir.join(CALIBRATION_FILE);
    let mut w = csv::Writer::from_writer(create(Stage::Evaluate, &path)?);
    let inv = |e: csv::Error| PipelineError::Invalid {
        stage: Stage::Evaluate,
        message: e.to_string(),
    };
    w.write_record(["run", "mean_predicted", "observed_rate", "n"])
        .map_err(inv)?;
    for m in &metrics {
        for b in &m.calibration_bins {
            w.write_record([
                m.run.to_string(),
                b.mean_predicted.to_string(),
                b.observed_rate.to_string(),
                b.n.to_string(),
            ])
            .map_err(inv)?;
        }
    }
    w.flush().map_err(io_err(Stage::Evaluate, &path))?;
    let summary_path = models_dir.join(TRAIN_SUMMARY_FILE);
    let kind_comparison = if summary_path.exists() {
        let s: TrainSummary =
            serde_json::from_str(&read_to_string(Stage::Evaluate, &summary_path)?).map_err(
                |e| PipelineError::Invalid {
                    stage: Stage::Evaluate,
                    message: e.to_string(),
                },
            )?;
        Some(s.runs)
    } else {
        None
    };
    let report = Report {
        n_runs: runs.len(),
        runs,
        aggregate: MetricSummary {
            auroc_text: auroc.to_string(),
            auprc_text: auprc.to_string(),
            brier_text: brier.to_string(),
            auroc,
            auprc,
            brier,
        },
        kind_comparison,
    };
    write_json(Stage::Evaluate, &out_dir.join(REPORT_FILE), &report)?;
    info!("evaluate: auROC {}", report.aggregate.auroc_text);
    Ok((report, metrics))
}

pub fn load_predictions(models_dir: &Path) -> Result<Vec<TestPrediction>> {
    Ok(read_predictions(open(
        Stage::Evaluate,
        &models_dir.join(PREDICTIONS_FILE),
    )?)?)
}

/// Rules against the model on every event with at least one test prediction.
pub fn compare_rules_stage(
    cohort: &Cohort,
    labs: &Dataset,
    preds: &[TestPrediction],
    ranges: &ReferenceRanges,
    seed: u64,
    out: &Path,
) -> Result<RulesVsModel> {
    let probs: HashMap<String, EventProbability> = event_probabilities(preds)
        .into_iter()
        .map(|e| (e.event_id.clone(), e))
        .collect();
    let events: Vec<(&crate::cohort::CbcEvent, f64)> = cohort
        .events
        .iter()
        .filter_map(|e| probs.get(&e.event_id).map(|p| (e, p.mean_prob)))
        .collect();
    let contexts: Vec<RuleContext> = events
        .iter()
        .map(|(e, _)| RuleContext::for_event(e, labs.patient_results(&e.patient_id)))
        .collect();
    let items: Vec<_> = events
        .iter()
        .zip(&contexts)
        .map(|((e, p), c)| (*e, c, *p))
        .collect();
    let cmp = compare_rules_vs_model(&items, ranges, seed)?;
    let mut w = create(Stage::Evaluate, out)?;
    cmp.write_csv(&mut w)?;
    w.flush().map_err(io_err(Stage::Evaluate, out))?;
    let rules_path = out.with_file_name(RULES_REPORT_FILE);
    let mut w = create(Stage::Evaluate, &rules_path)?;
    let scores: Vec<_> = cmp.rules.iter().map(|r| r.score.clone()).collect();
    write_rules_report(&scores, &mut w).map_err(|e| PipelineError::Invalid {
        stage: Stage::Evaluate,
        message: e.to_string(),
    })?;
    w.flush().map_err(io_err(Stage::Evaluate, &rules_path))?;
    Ok(cmp)
}

/// Decile analysis over ordered events, by median test probability.
pub fn mnar_stage(
    cohort: &Cohort,
    labs: &Dataset,
    preds: &[TestPrediction],
    ranges: &ReferenceRanges,
    out: &Path,
) -> Result<MnarTable> {
    let probs: HashMap<String, EventProbability> = event_probabilities(preds)
        .into_iter()
        .map(|e| (e.event_id.clone(), e))
        .collect();
    let items: Vec<MnarItem> = cohort
        .events
        .iter()
        .filter(|e| e.label)
        .filter_map(|e| {
            let p = probs.get(&e.event_id)?;
            let ferritin = label_ferritin(e, labs.patient_results(&e.patient_id), &cohort.policy)?;
            Some(MnarItem {
                prob: p.median_prob,
                gender: e.gender,
                ferritin,
            })
        })
        .collect();
    let table = mnar_decile_analysis(&items, ranges)?;
    let mut w = create(Stage::Evaluate, out)?;
    table.write_csv(&mut w)?;
    w.flush().map_err(io_err(Stage::Evaluate, out))?;
    info!("mnar: spearman rho {:.3}", table.rho);
    Ok(table)
}

pub fn review_queue_stage(
    preds: &[TestPrediction],
    k: usize,
    m: usize,
    runs: usize,
    seed: u64,
    out: &Path,
) -> Result<ReviewQueue> {
    let q = review_queue(&event_probabilities(preds), k, m, runs, seed)?;
    let mut w = create(Stage::Evaluate, out)?;
    q.write_csv(&mut w)?;
    w.flush().map_err(io_err(Stage::Evaluate, out))?;
    info!(
        "review queue: ordered at or below {:.3}, not ordered at or above {:.3}",
        q.ordered_low.cutoff, q.not_ordered_high.cutoff
    );
    Ok(q)
}

/// Scores a JSON object of feature values (schema names) and applies the
/// operating point. The optional key `clinician_ordered_reflex` overrides
/// the default implied by the mode.
pub fn decide(
    artifact: &ModelArtifact,
    input: &serde_json::Value,
    op: OperatingPoint,
) -> Result<ReflexDecision> {
    let bad = |m: String| PipelineError::Invalid {
        stage: Stage::Evaluate,
        message: m,
    };
    let obj = input
        .as_object()
        .ok_or_else(|| bad("decision input must be a JSON object".into()))?;
    let mut ordered = op.mode == DecisionMode::Variation1Cancel;
    let mut values = Vec::new();
    for (k, v) in obj {
        if k == "clinician_ordered_reflex" {
            ordered = v
                .as_bool()
                .ok_or_else(|| bad("clinician_ordered_reflex must be a boolean".into()))?;
            continue;
        }
        let x = v
            .as_f64()
            .ok_or_else(|| bad(format!("`{k}` must be a number")))?;
        values.push((k.as_str(), x));
    }
    let row = raw_row_from_named(&artifact.schema, values)?;
    let p = artifact.predict_proba(&row)?;
    Ok(reflex_decide(p, op, ordered)?)
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub files: Vec<FileEntry>,
    pub stages: Vec<StageTiming>,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let mut f = open(Stage::Evaluate, path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut n = 0u64;
    loop {
        let k = f.read(&mut buf).map_err(io_err(Stage::Evaluate, path))?;
        if k == 0 {
            break;
        }
        n += k as u64;
        h.update(&buf[..k]);
    }
    Ok((n, hex::encode(h.finalize())))
}

fn list_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            list_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Every file under `dir` except the manifest itself, with checksums.
pub fn checksum_tree(dir: &Path) -> Result<Vec<FileEntry>> {
    let mut files = Vec::new();
    list_files(dir, &mut files).map_err(io_err(Stage::Evaluate, dir))?;
    files
        .into_iter()
        .filter(|p| p.file_name().map_or(true, |n| n != MANIFEST_FILE))
        .map(|p| {
            let (bytes, sha256) = sha256_file(&p)?;
            Ok(FileEntry {
                path: p
                    .strip_prefix(dir)
                    .unwrap_or(&p)
                    .to_string_lossy()
                    .replace('\\', "/"),
                bytes,
                sha256,
            })
        })
        .collect()
}

/// Output layout of [`run_pipeline`] under `out_dir`.
pub struct PipelineLayout {
    pub data: PathBuf,
    pub cohort: PathBuf,
    pub features: PathBuf,
    pub models: PathBuf,
    pub evaluation: PathBuf,
}

impl PipelineLayout {
    pub fn new(out_dir: &Path) -> Self {
        PipelineLayout {
            data: out_dir.join("data"),
            cohort: out_dir.join(COHORT_FILE),
            features: out_dir.join("features"),
            models: out_dir.join("models"),
            evaluation: out_dir.join("evaluation"),
        }
    }
}

/// All stages in order: optional synthesis, ingest, cohort, features,
/// training, evaluation, rule comparison, decile analysis and review queue.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let out = &cfg.paths.out_dir;
    let layout = PipelineLayout::new(out);
    let mut stages = Vec::new();
    let mut timed = |name: &str, started: Instant| {
        stages.push(StageTiming {
            stage: name.to_string(),
            seconds: started.elapsed().as_secs_f64(),
        })
    };

    let (patients, labs) = match &cfg.synth {
        Some(s) => {
            let t = Instant::now();
            let synth = generate(s)?;
            synth.write_dir(&layout.data)?;
            timed("synth", t);
            (
                layout.data.join(crate::synth::PATIENTS_FILE),
                layout.data.join(crate::synth::LABS_FILE),
            )
        }
        None => (
            cfg.paths.patients.clone().expect("validated"),
            cfg.paths.labs.clone().expect("validated"),
        ),
    };

    let t = Instant::now();
    let (dataset, _) = load_dataset(&patients, &labs, cfg.ingest.strict)?;
    timed("ingest", t);

    let t = Instant::now();
    let cohort = build_cohort_stage(
        &dataset,
        cfg.cohort.window()?,
        cfg.cohort.label_policy(),
        &layout.cohort,
    )?;
    timed("cohort", t);

    let t = Instant::now();
    let matrix = featurize_stage(
        &cohort,
        &dataset,
        &FeaturizeOptions {
            anchor: cfg.features.anchor,
            drop_std: cfg.features.drop_std,
            no_scale: cfg.features.no_scale,
        },
        &layout.features,
    )?;
    timed("featurize", t);

    let t = Instant::now();
    let [a, b, c] = cfg.split.ratios;
    train_stage(
        &matrix,
        &TrainOptions {
            n_runs: cfg.split.n_runs,
            ratios: (a, b, c),
            seed: cfg.split.seed,
            grid: cfg.grid.grid(),
            metric: cfg.grid.tuning_metric,
        },
        &layout.models,
    )?;
    timed("train", t);

    let t = Instant::now();
    evaluate_stage(
        &layout.models,
        &matrix,
        cfg.evaluate.calibration_bins,
        &layout.evaluation,
    )?;
    let preds = load_predictions(&layout.models)?;
    let ranges = ReferenceRanges::default();
    compare_rules_stage(
        &cohort,
        &dataset,
        &preds,
        &ranges,
        cfg.evaluate.random_control_seed,
        &layout.evaluation.join(FIGURE4_FILE),
    )?;
    mnar_stage(
        &cohort,
        &dataset,
        &preds,
        &ranges,
        &layout.evaluation.join(MNAR_FILE),
    )?;
    review_queue_stage(
        &preds,
        cfg.evaluate.review_k,
        cfg.evaluate.review_m,
        cfg.evaluate.review_runs,
        cfg.evaluate.review_seed,
        &layout.evaluation.join(REVIEW_QUEUE_FILE),
    )?;
    timed("evaluate", t);

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        files: checksum_tree(out)?,
        stages,
    };
    write_json(Stage::Evaluate, &out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig {
            synth: Some(SynthConfig::default()),
            ..Default::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_uses_defaults_and_rejects_unknown_keys() {
        let cfg = PipelineConfig::from_toml(
            "[split]\nn_runs = 3\nseed = 9\n\n[grid]\nmax_depth = [4, 0]\n",
        )
        .unwrap();
        assert_eq!(cfg.split.n_runs, 3);
        assert_eq!(cfg.split.ratios, [0.8, 0.1, 0.1]);
        assert_eq!(cfg.grid.l2.len(), 4);
        assert_eq!(cfg.grid.grid().candidates.len(), 4 + 2 * 2 * 3);
        let err = PipelineConfig::from_toml("[split]\nnruns = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 6);
    }

    #[test]
    fn validation_checks_ratios_and_paths() {
        let mut cfg = PipelineConfig {
            synth: Some(SynthConfig::default()),
            ..Default::default()
        };
        cfg.validate().unwrap();
        cfg.split.ratios = [0.8, 0.1, 0.2];
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        let no_data = PipelineConfig::default();
        assert!(matches!(no_data.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn exit_codes_are_distinct_per_stage() {
        let codes: Vec<i32> = [
            Stage::Ingest,
            Stage::Cohort,
            Stage::Featurize,
            Stage::Train,
            Stage::Evaluate,
            Stage::Config,
        ]
        .iter()
        .map(|s| s.exit_code())
        .collect();
        assert_eq!(codes, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(PipelineError::from(CohortError::EmptyCohort).exit_code(), 2);
        assert_eq!(PipelineError::from(LearnError::EmptyGrid).exit_code(), 4);
    }
}
