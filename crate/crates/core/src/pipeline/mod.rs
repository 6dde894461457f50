//! End-to-end estimation: defend, split, train embeddings, estimate, check
//! bounds, report.

mod folds;
mod report;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{self, BoundsError};
use crate::defenses::{apply_defense, DefenseError, DefenseSpec, DefenseVariant};
use crate::embedding::{embed, train_embedding, EmbeddingConfig, EmbeddingError};
use crate::estimators::{estimate_ber, estimate_mi, Backend, EstimatorError, EvalSplit};
use crate::features::{FeatureMatrix, FeatureTag};
use crate::manual_features::{manual_features, MANUAL_FEATURE_DIM};
use crate::rng::{derive_seed, purpose};
use crate::synth::{self, SynthError, SynthSpec};
use crate::traces::{self, Dataset, RepKind, RepVector, TraceError};

pub use folds::{make_folds, Fold, SplitPlan};
pub use report::{
    emit_report, read_report, summary_csv, Aggregate, EstimateReport, FoldOutcome, FoldReport, FoldSuccess, MeanStd,
    RepAggregate, RepResult, Timing, REPORT_JSON, SUMMARY_CSV,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data or I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) | PipelineError::Io { .. } => 3,
            PipelineError::Numerical(_) => 4,
        }
    }
}

impl From<TraceError> for PipelineError {
    fn from(e: TraceError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<DefenseError> for PipelineError {
    fn from(e: DefenseError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<EmbeddingError> for PipelineError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::InvalidConfig(_) | EmbeddingError::Architecture(_) | EmbeddingError::TooFewSamples { .. } => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<EstimatorError> for PipelineError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::ClassMissing { .. } | EstimatorError::SingletonClass { .. } => PipelineError::Data(e.to_string()),
            _ => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<BoundsError> for PipelineError {
    fn from(e: BoundsError) -> Self {
        PipelineError::Numerical(e.to_string())
    }
}

/// Where traces come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// `<root>/<class>/<trace>.txt`.
    Dir { root: PathBuf },
    Manifest { path: PathBuf },
    /// Generated template traces.
    Synth { spec: SynthSpec },
}

fn default_reps() -> Vec<RepKind> {
    vec![RepKind::Directional, RepKind::Timing]
}

fn default_trace_length() -> usize {
    traces::DEFAULT_TRACE_LENGTH
}

fn default_k() -> usize {
    5
}

fn default_folds() -> usize {
    5
}

fn default_true() -> bool {
    true
}

fn default_output() -> PathBuf {
    PathBuf::from("wfse-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub defense: Option<DefenseSpec>,
    #[serde(default = "default_reps")]
    pub representations: Vec<RepKind>,
    #[serde(default)]
    pub include_manual_features: bool,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default = "default_trace_length")]
    pub trace_length: usize,
    #[serde(default = "default_k")]
    pub k_mi: usize,
    #[serde(default = "default_folds")]
    pub num_folds: usize,
    /// Subset of fold indices to run; all when absent.
    #[serde(default)]
    pub folds: Option<Vec<usize>>,
    #[serde(default)]
    pub master_seed: u64,
    /// Report each embedding's own held-out classification error.
    #[serde(default = "default_true")]
    pub baseline_classifier_error: bool,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl RunConfig {
    pub fn new(dataset: DatasetSource) -> Self {
        RunConfig {
            dataset,
            defense: None,
            representations: default_reps(),
            include_manual_features: false,
            embedding: EmbeddingConfig::default(),
            trace_length: default_trace_length(),
            k_mi: default_k(),
            num_folds: default_folds(),
            folds: None,
            master_seed: 0,
            baseline_classifier_error: true,
            backend: Backend::Auto,
            output: default_output(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |s: String| Err(PipelineError::Config(s));
        if self.representations.is_empty() && !self.include_manual_features {
            return bad("at least one representation must be enabled".into());
        }
        let mut kinds = self.representations.clone();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.representations.len() {
            return bad("duplicate representation".into());
        }
        if self.num_folds < 2 {
            return bad(format!("num_folds must be >= 2, got {}", self.num_folds));
        }
        if let Some(folds) = &self.folds {
            if folds.is_empty() {
                return bad("fold list is empty".into());
            }
            if let Some(f) = folds.iter().find(|&&f| f >= self.num_folds) {
                return bad(format!("fold {f} out of range for {} folds", self.num_folds));
            }
        }
        if self.k_mi == 0 {
            return bad("k_mi must be >= 1".into());
        }
        if self.trace_length == 0 {
            return bad("trace_length must be >= 1".into());
        }
        if let Some(d) = &self.defense {
            d.validate()?;
        }
        if let DatasetSource::Synth { spec } = &self.dataset {
            spec.validate()?;
            if !matches!(spec.variant, synth::SynthVariant::TemplateTraces { .. }) {
                return bad("the pipeline needs a trace-producing synthetic variant (template_traces)".into());
            }
        }
        self.embedding.validate()?;
        Ok(())
    }

    fn selected_folds(&self) -> Vec<usize> {
        match &self.folds {
            Some(f) => {
                let mut f = f.clone();
                f.sort_unstable();
                f.dedup();
                f
            }
            None => (0..self.num_folds).collect(),
        }
    }
}

/// Loads the configured dataset.
pub fn load_dataset(source: &DatasetSource) -> Result<Dataset, PipelineError> {
    Ok(match source {
        DatasetSource::Dir { root } => traces::load_dir(root)?,
        DatasetSource::Manifest { path } => traces::load_manifest(path)?,
        DatasetSource::Synth { spec } => synth::generate(spec)?
            .traces
            .ok_or_else(|| PipelineError::Config("synthetic variant produces no traces".into()))?,
    })
}

/// Loads the dataset named in `cfg` and runs the pipeline on it.
pub fn run_estimation(cfg: &RunConfig) -> Result<EstimateReport, PipelineError> {
    cfg.validate()?;
    let start = Instant::now();
    let dataset = load_dataset(&cfg.dataset)?;
    let load = start.elapsed().as_secs_f64();
    let mut report = run_on_dataset(dataset, cfg)?;
    report.timing.load_seconds = load;
    report.timing.total_seconds += load;
    Ok(report)
}

/// Runs the pipeline on an in-memory dataset.
pub fn run_on_dataset(dataset: Dataset, cfg: &RunConfig) -> Result<EstimateReport, PipelineError> {
    cfg.validate()?;
    let start = Instant::now();
    let (dataset, sanitize) = dataset.sanitized();
    if sanitize.rejected_empty + sanitize.rejected_incoming_first > 0 {
        log::warn!(
            "sanitize rejected {} empty and {} incoming-first traces",
            sanitize.rejected_empty,
            sanitize.rejected_incoming_first
        );
    }
    dataset.validate()?;

    let defense_start = Instant::now();
    let (dataset, overhead) = match &cfg.defense {
        Some(spec) if !matches!(spec.variant, DefenseVariant::External { .. }) => {
            let (d, stats) = apply_defense(&dataset, spec)?;
            log::info!(
                "defense {}: bandwidth overhead {:.3}, mean delay {:.3}s",
                spec.name(),
                stats.bandwidth_overhead,
                stats.mean_delay_per_trace
            );
            (d, Some(stats))
        }
        _ => (dataset, None),
    };
    let defense_seconds = defense_start.elapsed().as_secs_f64();

    let labels = dataset.labels();
    let c = dataset.num_classes();
    let plan = make_folds(&labels, &dataset.class_names, cfg.num_folds, derive_seed(cfg.master_seed, &[purpose::FOLDS]))?;

    let encoded: Vec<(RepKind, Vec<RepVector>)> = cfg
        .representations
        .iter()
        .map(|&k| Ok((k, dataset.encode(k, cfg.trace_length)?)))
        .collect::<Result<_, TraceError>>()?;
    let manual = if cfg.include_manual_features {
        let data: Vec<f64> = dataset.traces.iter().flat_map(manual_features).collect();
        Some(
            FeatureMatrix::new(data, MANUAL_FEATURE_DIM, labels.clone(), c, FeatureTag::ManualFeatures)
                .map_err(|e| PipelineError::Numerical(e.to_string()))?,
        )
    } else {
        None
    };

    let mut folds = Vec::new();
    let mut fold_seconds = Vec::new();
    for f in cfg.selected_folds() {
        let fold_start = Instant::now();
        let fold = &plan.folds[f];
        let seed = derive_seed(cfg.master_seed, &[purpose::EMBEDDING, f as u64]);
        let outcome = match run_fold(fold, seed, &labels, c, &encoded, manual.as_ref(), cfg) {
            Ok(s) => {
                log::info!("fold {f}: BER {:.4}, MI {:.4} bits", s.ber, s.mi_bits);
                FoldOutcome::Ok(s)
            }
            Err(e) => {
                log::warn!("fold {f} failed: {e}");
                FoldOutcome::Failed { reason: e.to_string() }
            }
        };
        folds.push(FoldReport { fold: f, seed, outcome });
        fold_seconds.push(fold_start.elapsed().as_secs_f64());
    }
    let aggregate = match Aggregate::from_folds(&folds, c) {
        Ok(a) => Some(a),
        Err(e) => {
            let reason = folds.iter().find_map(|f| match &f.outcome {
                FoldOutcome::Failed { reason } => Some(reason.clone()),
                FoldOutcome::Ok(_) => None,
            });
            return Err(PipelineError::Numerical(format!(
                "{e}: {}",
                reason.unwrap_or_else(|| "no folds selected".into())
            )));
        }
    };

    Ok(EstimateReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        num_classes: c,
        num_traces: dataset.len(),
        sanitize,
        defense: overhead,
        per_class_fold: plan.per_class_fold.clone(),
        dropped_per_class: plan.dropped.clone(),
        folds,
        aggregate,
        timing: Timing {
            load_seconds: 0.0,
            defense_seconds,
            fold_seconds,
            total_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

fn select<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

fn run_fold(
    fold: &Fold,
    seed: u64,
    labels: &[usize],
    num_classes: usize,
    encoded: &[(RepKind, Vec<RepVector>)],
    manual: Option<&FeatureMatrix>,
    cfg: &RunConfig,
) -> Result<FoldSuccess, PipelineError> {
    let eval = fold.eval();
    let train_set: HashSet<usize> = fold.train.iter().copied().collect();
    if eval.iter().any(|i| train_set.contains(i)) {
        return Err(PipelineError::Numerical(format!(
            "fold {}: evaluation set overlaps embedding training set",
            fold.index
        )));
    }
    let train_labels = select(labels, &fold.train);
    let eval_labels = select(labels, &eval);
    let split = EvalSplit {
        e1: (0..fold.e1.len()).collect(),
        e2: (fold.e1.len()..eval.len()).collect(),
    };

    let mut matrices = Vec::new();
    let mut extras: Vec<(Option<f64>, Option<f64>)> = Vec::new();
    for (r, (kind, reps)) in encoded.iter().enumerate() {
        let ecfg = EmbeddingConfig {
            seed: derive_seed(seed, &[r as u64, cfg.embedding.seed]),
            ..cfg.embedding.clone()
        };
        let model = train_embedding(&select(reps, &fold.train), &train_labels, num_classes, &ecfg)?;
        let eval_reps = select(reps, &eval);
        let m = embed(&model, &eval_reps, eval_labels.clone())?;
        let err = if cfg.baseline_classifier_error {
            Some(model.classification_error(&eval_reps, &eval_labels)?)
        } else {
            None
        };
        log::debug!("fold {} {}: final loss {:?}", fold.index, kind.name(), model.loss_history().last());
        extras.push((err, model.loss_history().last().copied()));
        matrices.push(m);
    }
    if let Some(m) = manual {
        matrices.push(m.select(&eval));
        extras.push((None, None));
    }

    let ber = estimate_ber(&matrices, &split, cfg.backend)?;
    let mi = estimate_mi(&matrices, &split, cfg.k_mi, cfg.backend)?;
    let consistency = bounds::check_consistency(&ber, &mi, num_classes)?;
    let reps: Vec<RepResult> = ber
        .per_rep
        .iter()
        .zip(&mi.per_rep)
        .zip(&extras)
        .map(|((b, m), &(classifier_error, final_train_loss))| RepResult {
            tag: b.tag,
            knn_error: b.knn_error,
            ber_lower: b.lower_bound,
            mi_bits: m.bits,
            mi_clamped: m.clamped,
            classifier_error,
            final_train_loss,
        })
        .collect();
    let classifier_error = reps
        .iter()
        .filter_map(|r| r.classifier_error)
        .min_by(f64::total_cmp);
    Ok(FoldSuccess {
        reps,
        ber: ber.aggregate,
        mi_bits: mi.aggregate,
        consistency,
        classifier_error,
        e1_size: fold.e1.len(),
        e2_size: fold.e2.len(),
        train_size: fold.train.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::LayerSpec;
    use crate::synth::SynthVariant;

    fn tiny(flip_prob: f64) -> RunConfig {
        let mut cfg = RunConfig::new(DatasetSource::Synth {
            spec: SynthSpec {
                variant: SynthVariant::TemplateTraces {
                    classes: 4,
                    flip_prob,
                    trace_len: 12,
                },
                samples_per_class: 40,
                seed: 3,
            },
        });
        cfg.trace_length = 16;
        cfg.num_folds = 2;
        cfg.folds = Some(vec![0]);
        cfg.embedding = EmbeddingConfig {
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 16 }, LayerSpec::Activation],
            batch_size: 16,
            epochs: 15,
            learning_rate: 0.05,
            ..EmbeddingConfig::default()
        };
        cfg
    }

    #[test]
    fn config_round_trips_through_toml() {
        let text = r#"
            master_seed = 7
            trace_length = 64
            num_folds = 2
            representations = ["directional"]

            [dataset]
            source = "synth"
            [dataset.spec]
            variant = "template_traces"
            classes = 3
            flip_prob = 0.1
            trace_len = 8
            samples_per_class = 10

            [defense]
            variant = "merge"
            m = 2
            seed = 4

            [embedding]
            epochs = 3
            batch_size = 4
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.representations, vec![RepKind::Directional]);
        assert_eq!(cfg.defense, Some(DefenseSpec::merge(2, 4)));
        assert_eq!(cfg.embedding.epochs, 3);
        assert_eq!(cfg.embedding.learning_rate, 0.002);
        let back = RunConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors() {
        let mut cfg = tiny(0.0);
        cfg.representations.clear();
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let mut cfg = tiny(0.0);
        cfg.folds = Some(vec![]);
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(0.0);
        cfg.folds = Some(vec![2]);
        assert!(cfg.validate().is_err());
        assert!(RunConfig::from_toml("unknown = 1").is_err());
    }

    #[test]
    fn separable_templates_are_fully_identified() {
        let report = run_estimation(&tiny(0.0)).unwrap();
        let agg = report.aggregate.unwrap();
        assert!(agg.ber.mean <= 0.01, "{agg:?}");
        assert!(agg.mi_bits.mean >= 0.97 * 2.0, "{agg:?}");
        assert_eq!(agg.ber.std, None);
        assert_eq!(report.folds.len(), 1);
    }

    #[test]
    fn pure_noise_templates_carry_nothing() {
        let mut cfg = tiny(0.5);
        if let DatasetSource::Synth { spec } = &mut cfg.dataset {
            spec.samples_per_class = 200;
        }
        let report = run_estimation(&cfg).unwrap();
        let agg = report.aggregate.unwrap();
        assert!(agg.mi_bits.mean <= 0.05 * 2.0, "{agg:?}");
        assert!(agg.ber.mean >= 0.9 * 0.75, "{agg:?}");
    }

    #[test]
    fn emit_is_byte_stable_and_refuses_empty() {
        let report = run_estimation(&tiny(0.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (_, csv) = emit_report(&report, dir.path()).unwrap();
        let first = std::fs::read(&csv).unwrap();
        emit_report(&report, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(&csv).unwrap());
        assert_eq!(String::from_utf8(first).unwrap().lines().count(), 3);

        let mut empty = report.clone();
        empty.folds.clear();
        let other = dir.path().join("empty");
        assert!(emit_report(&empty, &other).is_err());
        assert!(!other.exists());
    }
}
