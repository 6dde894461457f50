//! Run reports: per-fold results, cross-fold aggregates, and their JSON and
//! CSV renderings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, RunConfig};
use crate::bounds::Consistency;
use crate::defenses::OverheadStats;
use crate::features::FeatureTag;
use crate::traces::SanitizeSummary;

pub const REPORT_JSON: &str = "report.json";
pub const SUMMARY_CSV: &str = "summary.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub tag: FeatureTag,
    /// Mean 1-NN error over E1 -> E2 and E2 -> E1.
    pub knn_error: f64,
    pub ber_lower: f64,
    pub mi_bits: f64,
    pub mi_clamped: bool,
    /// Held-out error of the embedding's own classifier head.
    pub classifier_error: Option<f64>,
    pub final_train_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSuccess {
    pub reps: Vec<RepResult>,
    /// Minimum BER lower bound over representations.
    pub ber: f64,
    /// Maximum MI over representations, bits.
    pub mi_bits: f64,
    pub consistency: Consistency,
    /// Minimum held-out classifier error over learned representations.
    pub classifier_error: Option<f64>,
    pub e1_size: usize,
    pub e2_size: usize,
    pub train_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FoldOutcome {
    Ok(FoldSuccess),
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub seed: u64,
    pub outcome: FoldOutcome,
}

impl FoldReport {
    pub fn success(&self) -> Option<&FoldSuccess> {
        match &self.outcome {
            FoldOutcome::Ok(s) => Some(s),
            FoldOutcome::Failed { .. } => None,
        }
    }
}

/// Mean over folds, with the sample standard deviation when at least two
/// folds contribute.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
    pub folds: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1.0)).sqrt()
        });
        Some(MeanStd {
            mean,
            std,
            folds: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepAggregate {
    pub tag: FeatureTag,
    pub ber_lower: MeanStd,
    pub mi_bits: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Per-fold minimum over representations, averaged over folds.
    pub ber: MeanStd,
    /// Per-fold maximum over representations, averaged over folds.
    pub mi_bits: MeanStd,
    pub consistency: Consistency,
    pub classifier_error: Option<MeanStd>,
    pub per_rep: Vec<RepAggregate>,
}

impl Aggregate {
    /// Recomputes aggregates from successful folds.
    pub fn from_folds(folds: &[FoldReport], num_classes: usize) -> Result<Self, PipelineError> {
        let ok: Vec<&FoldSuccess> = folds.iter().filter_map(FoldReport::success).collect();
        let bers: Vec<f64> = ok.iter().map(|f| f.ber).collect();
        let mis: Vec<f64> = ok.iter().map(|f| f.mi_bits).collect();
        let ber = MeanStd::of(&bers).ok_or_else(|| PipelineError::Numerical("no fold completed".into()))?;
        let mi = MeanStd::of(&mis).expect("same fold count as BER");
        let errors: Vec<f64> = ok.iter().filter_map(|f| f.classifier_error).collect();
        let classifier_error = if errors.len() == ok.len() { MeanStd::of(&errors) } else { None };
        let mut per_rep = Vec::new();
        for r in &ok[0].reps {
            let pick = |g: &dyn Fn(&RepResult) -> f64| -> Vec<f64> {
                ok.iter()
                    .filter_map(|f| f.reps.iter().find(|x| x.tag == r.tag).map(g))
                    .collect()
            };
            per_rep.push(RepAggregate {
                tag: r.tag,
                ber_lower: MeanStd::of(&pick(&|x| x.ber_lower)).expect("present in first fold"),
                mi_bits: MeanStd::of(&pick(&|x| x.mi_bits)).expect("present in first fold"),
            });
        }
        let consistency = crate::bounds::classify(ber.mean, mi.mean, num_classes)
            .map_err(|e| PipelineError::Numerical(e.to_string()))?;
        Ok(Aggregate {
            ber,
            mi_bits: mi,
            consistency,
            classifier_error,
            per_rep,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub load_seconds: f64,
    pub defense_seconds: f64,
    pub fold_seconds: Vec<f64>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub tool_version: String,
    pub config: RunConfig,
    pub num_classes: usize,
    pub num_traces: usize,
    pub sanitize: SanitizeSummary,
    pub defense: Option<OverheadStats>,
    pub per_class_fold: Vec<usize>,
    pub dropped_per_class: Vec<usize>,
    pub folds: Vec<FoldReport>,
    pub aggregate: Option<Aggregate>,
    pub timing: Timing,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per fold and representation; failed folds get a single row with
/// empty numeric fields. Contains no timing data.
pub fn summary_csv(report: &EstimateReport) -> String {
    let mut out = String::from(
        "fold,status,representation,knn_error,ber_lower,mi_bits,mi_clamped,classifier_error,fold_ber,fold_mi_bits,consistency\n",
    );
    for f in &report.folds {
        match &f.outcome {
            FoldOutcome::Ok(s) => {
                let status = match s.consistency {
                    Consistency::Consistent => "consistent",
                    Consistency::MiBelowFano { .. } => "mi_below_fano",
                    Consistency::MiAboveKovalevskij { .. } => "mi_above_kovalevskij",
                };
                for r in &s.reps {
                    let _ = writeln!(
                        out,
                        "{},ok,{},{},{},{},{},{},{},{},{}",
                        f.fold,
                        r.tag,
                        r.knn_error,
                        r.ber_lower,
                        r.mi_bits,
                        r.mi_clamped,
                        opt(r.classifier_error),
                        s.ber,
                        s.mi_bits,
                        status
                    );
                }
            }
            FoldOutcome::Failed { .. } => {
                let _ = writeln!(out, "{},failed,,,,,,,,,", f.fold);
            }
        }
    }
    out
}

/// Writes `report.json` and `summary.csv` into `dir`, returning both paths.
/// Nothing is written for a report without folds.
pub fn emit_report(report: &EstimateReport, dir: &Path) -> Result<(PathBuf, PathBuf), PipelineError> {
    if report.folds.is_empty() {
        return Err(PipelineError::Config("report has no folds".into()));
    }
    let json = serde_json::to_string_pretty(report).map_err(|e| PipelineError::Numerical(e.to_string()))?;
    let csv = summary_csv(report);
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let json_path = dir.join(REPORT_JSON);
    let csv_path = dir.join(SUMMARY_CSV);
    fs::write(&json_path, json + "\n").map_err(|e| PipelineError::io(&json_path, e))?;
    fs::write(&csv_path, csv).map_err(|e| PipelineError::io(&csv_path, e))?;
    Ok((json_path, csv_path))
}

pub fn read_report(path: &Path) -> Result<EstimateReport, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}
