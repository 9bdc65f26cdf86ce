use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use reflex::analysis::{DecisionMode, OperatingPoint};
use reflex::cohort::LabelMode;
use reflex::domain::ReferenceRanges;
use reflex::featurize::AnchorMode;
use reflex::learn::TuningMetric;
use reflex::pipeline::{
    build_cohort_stage, compare_rules_stage, decide, evaluate_stage, featurize_stage,
    load_artifact, load_dataset, load_features, load_labs, load_predictions, mnar_stage,
    read_cohort, review_queue_stage, run_pipeline, train_stage, FeaturizeOptions, PipelineConfig,
    PipelineError, Result, Stage, TrainOptions,
};
use reflex::synth::{generate, SynthConfig};

/// Ferritin reflex prediction: cohorts, features, models and analyses.
#[derive(Parser, Debug)]
#[command(name = "reflex", version, about)]
struct Cli {
    /// Worker threads for all parallel work; outputs do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Pipeline config whose values fill flags left unset.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic patients, labs and ground truth.
    SynthGen(SynthGenArgs),
    /// Extract CBC events with ferritin labels.
    BuildCohort(BuildCohortArgs),
    /// Aggregate lab history into a feature matrix.
    Featurize(FeaturizeArgs),
    /// Split, tune and save one model per run.
    Train(TrainArgs),
    /// Score saved models on their test partitions.
    Evaluate(EvaluateArgs),
    /// Compare the reflex rules with the model.
    CompareRules(CompareRulesArgs),
    /// Decile analysis of ferritin values against predicted probability.
    Mnar(MnarArgs),
    /// Extract events for chart review.
    ReviewQueue(ReviewQueueArgs),
    /// Score one CBC and print a reflex decision as JSON.
    Decide(DecideArgs),
    /// Run every stage from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Primary,
    Refined,
}

impl From<PolicyArg> for LabelMode {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Primary => LabelMode::Primary,
            PolicyArg::Refined => LabelMode::Refined,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AnchorArg {
    PerEvent,
    PerPatient,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Auroc,
    Auprc,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Variation1,
    Variation2,
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    /// Output directory for patients.csv, labs.csv and truth files.
    #[arg(long)]
    out: PathBuf,
    /// Number of patients.
    #[arg(long)]
    n_patients: Option<usize>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Make ferritin values independent of ordering propensity.
    #[arg(long)]
    mcar: bool,
}

#[derive(Args, Debug)]
struct LabelArgs {
    /// Label policy.
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
}

#[derive(Args, Debug)]
struct BuildCohortArgs {
    #[arg(long)]
    labs: Option<PathBuf>,
    #[arg(long)]
    patients: Option<PathBuf>,
    #[command(flatten)]
    label: LabelArgs,
    /// Reject the whole file on any malformed row.
    #[arg(long)]
    strict: bool,
    /// Output cohort CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    labs: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// History window anchor.
    #[arg(long, value_enum)]
    anchor: Option<AnchorArg>,
    /// Leave standard-deviation aggregates out of the schema.
    #[arg(long)]
    drop_std: bool,
    /// Skip the scaled copy of the matrix.
    #[arg(long)]
    no_scale: bool,
    #[command(flatten)]
    label: LabelArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory written by `featurize`.
    #[arg(long)]
    features: PathBuf,
    /// Train:tune:test percentages, e.g. 80:10:10.
    #[arg(long)]
    splits: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Metric used to pick the model on the tuning partition.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// Output directory for artifacts and predictions.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory written by `train`.
    #[arg(long)]
    models: PathBuf,
    /// Directory written by `featurize`.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    calibration_bins: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareRulesArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    labs: Option<PathBuf>,
    #[arg(long)]
    models: PathBuf,
    #[command(flatten)]
    label: LabelArgs,
    /// Seed of the random-ordering control.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV; rules_report.csv is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MnarArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    labs: Option<PathBuf>,
    #[command(flatten)]
    label: LabelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReviewQueueArgs {
    #[arg(long)]
    models: PathBuf,
    /// Cohort CSV; accepted for symmetry, events come from test predictions.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Events per group before sampling.
    #[arg(long)]
    k: Option<usize>,
    /// Events sampled per group.
    #[arg(long)]
    m: Option<usize>,
    /// Runs whose predictions enter the median.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecideArgs {
    /// Model artifact (run_XX.json).
    #[arg(long)]
    model: PathBuf,
    /// JSON object of feature values keyed by schema name.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Decision threshold; defaults to the configured one for the mode.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    strict: bool,
}

fn config_err(message: impl Into<String>) -> PipelineError {
    PipelineError::Config(message.into())
}

fn need(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| config_err(format!("--{flag} is required (or set it in the config)")))
}

fn parse_splits(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| config_err(format!("--splits `{s}` is not of the form 80:10:10")))?;
    let [a, b, c] = parts[..] else {
        return Err(config_err(format!("--splits `{s}` needs three parts")));
    };
    let total = a + b + c;
    if !(total > 0.0) || [a, b, c].iter().any(|v| !(*v > 0.0)) {
        return Err(config_err(format!("--splits `{s}` must be positive")));
    }
    Ok((a / total, b / total, c / total))
}

fn policy(cfg: &PipelineConfig, arg: &LabelArgs) -> reflex::cohort::LabelPolicy {
    let mut section = cfg.cohort.clone();
    if let Some(p) = arg.policy {
        section.policy = p.into();
    }
    section.label_policy()
}

fn synth_config(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if let Ok(cfg) = PipelineConfig::from_toml(&text) {
        if let Some(s) = cfg.synth {
            return Ok(s);
        }
    }
    toml_synth(&text)
}

fn toml_synth(text: &str) -> Result<SynthConfig> {
    SynthConfig::from_toml(text).map_err(|e| config_err(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let ranges = ReferenceRanges::default();
    match cli.command {
        Command::SynthGen(a) => {
            let mut s = match &cli.config {
                Some(p) => synth_config(p)?,
                None => SynthConfig::default(),
            };
            if let Some(n) = a.n_patients {
                s.n_patients = n;
            }
            if let Some(seed) = a.seed {
                s.seed = seed;
            }
            s.mcar_mode |= a.mcar;
            s.validate().map_err(|e| config_err(e.to_string()))?;
            let out = generate(&s)?;
            out.write_dir(&a.out)?;
            log::info!(
                "synth: {} patients, {} events, bayes auROC {:.4}",
                out.truth.meta.n_patients,
                out.truth.meta.n_events,
                out.truth.meta.bayes_auc
            );
        }
        Command::BuildCohort(a) => {
            let labs = need(a.labs.or(cfg.paths.labs.clone()), "labs")?;
            let patients = need(a.patients.or(cfg.paths.patients.clone()), "patients")?;
            let (dataset, _) = load_dataset(&patients, &labs, a.strict || cfg.ingest.strict)?;
            build_cohort_stage(
                &dataset,
                cfg.cohort.window()?,
                policy(&cfg, &a.label),
                &a.out,
            )?;
        }
        Command::Featurize(a) => {
            let labs = need(a.labs.or(cfg.paths.labs.clone()), "labs")?;
            let cohort = read_cohort(&a.cohort, policy(&cfg, &a.label))?;
            let dataset = load_labs(&labs, cfg.ingest.strict)?;
            let anchor = match a.anchor {
                Some(AnchorArg::PerEvent) => AnchorMode::PerEvent,
                Some(AnchorArg::PerPatient) => AnchorMode::PerPatientFirstCbc,
                None => cfg.features.anchor,
            };
            let opts = FeaturizeOptions {
                anchor,
                drop_std: a.drop_std || cfg.features.drop_std,
                no_scale: a.no_scale || cfg.features.no_scale,
            };
            featurize_stage(&cohort, &dataset, &opts, &a.out)?;
        }
        Command::Train(a) => {
            let [r0, r1, r2] = cfg.split.ratios;
            let ratios = match &a.splits {
                Some(s) => parse_splits(s)?,
                None => (r0, r1, r2),
            };
            let metric = match a.metric {
                Some(MetricArg::Auroc) => TuningMetric::Auroc,
                Some(MetricArg::Auprc) => TuningMetric::Auprc,
                None => cfg.grid.tuning_metric,
            };
            let opts = TrainOptions {
                n_runs: a.runs.unwrap_or(cfg.split.n_runs),
                ratios,
                seed: a.seed.unwrap_or(cfg.split.seed),
                grid: cfg.grid.grid(),
                metric,
            };
            if opts.n_runs == 0 {
                return Err(config_err("--runs must be positive"));
            }
            let (matrix, _) = load_features(&a.features)?;
            train_stage(&matrix, &opts, &a.out)?;
        }
        Command::Evaluate(a) => {
            let (matrix, _) = load_features(&a.features)?;
            let bins = a.calibration_bins.unwrap_or(cfg.evaluate.calibration_bins);
            evaluate_stage(&a.models, &matrix, bins, &a.out)?;
        }
        Command::CompareRules(a) => {
            let labs = need(a.labs.or(cfg.paths.labs.clone()), "labs")?;
            let cohort = read_cohort(&a.cohort, policy(&cfg, &a.label))?;
            let dataset = load_labs(&labs, cfg.ingest.strict)?;
            let preds = load_predictions(&a.models)?;
            let seed = a.seed.unwrap_or(cfg.evaluate.random_control_seed);
            compare_rules_stage(&cohort, &dataset, &preds, &ranges, seed, &a.out)?;
        }
        Command::Mnar(a) => {
            let labs = need(a.labs.or(cfg.paths.labs.clone()), "labs")?;
            let cohort = read_cohort(&a.cohort, policy(&cfg, &a.label))?;
            let dataset = load_labs(&labs, cfg.ingest.strict)?;
            let preds = load_predictions(&a.models)?;
            mnar_stage(&cohort, &dataset, &preds, &ranges, &a.out)?;
        }
        Command::ReviewQueue(a) => {
            if let Some(c) = &a.cohort {
                read_cohort(c, cfg.cohort.label_policy())?;
            }
            let e = &cfg.evaluate;
            let preds = load_predictions(&a.models)?;
            review_queue_stage(
                &preds,
                a.k.unwrap_or(e.review_k),
                a.m.unwrap_or(e.review_m),
                a.runs.unwrap_or(e.review_runs),
                a.seed.unwrap_or(e.review_seed),
                &a.out,
            )?;
        }
        Command::Decide(a) => {
            let artifact = load_artifact(&a.model)?;
            let text = std::fs::read_to_string(&a.input).map_err(|e| PipelineError::Io {
                stage: Stage::Evaluate,
                path: a.input.clone(),
                source: e,
            })?;
            let input: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| PipelineError::Invalid {
                    stage: Stage::Evaluate,
                    message: format!("{}: {e}", a.input.display()),
                })?;
            let (mode, default) = match a.mode {
                ModeArg::Variation1 => (
                    DecisionMode::Variation1Cancel,
                    cfg.decide.variation1_threshold,
                ),
                ModeArg::Variation2 => {
                    (DecisionMode::Variation2Add, cfg.decide.variation2_threshold)
                }
            };
            let op = OperatingPoint::new(mode, a.threshold.unwrap_or(default))
                .map_err(|e| config_err(e.to_string()))?;
            let decision = decide(&artifact, &input, op)?;
            let line = serde_json::to_string(&decision).map_err(|e| PipelineError::Invalid {
                stage: Stage::Evaluate,
                message: e.to_string(),
            })?;
            println!("{line}");
        }
        Command::Pipeline(a) => {
            if cli.config.is_none() {
                return Err(config_err("pipeline needs --config"));
            }
            let mut cfg = cfg;
            if let Some(out) = a.out {
                cfg.paths.out_dir = out;
            }
            if let Some(seed) = a.seed {
                cfg.split.seed = seed;
            }
            if let Some(runs) = a.runs {
                cfg.split.n_runs = runs;
            }
            cfg.ingest.strict |= a.strict;
            let manifest = run_pipeline(&cfg)?;
            log::info!(
                "pipeline: {} files written to {}",
                manifest.files.len(),
                cfg.paths.out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            error!("--threads must be at least 1");
            return ExitCode::from(Stage::Config.exit_code() as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            error!("thread pool: {e}");
            return ExitCode::from(Stage::Config.exit_code() as u8);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
