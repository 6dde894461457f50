//! Labelled feature rows, the common input of every estimator.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traces::RepKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTag {
    ManualFeatures,
    LearnedDirectional,
    LearnedTiming,
    /// Features used as-is (synthetic data, external matrices).
    Raw,
}

impl FeatureTag {
    pub fn learned(kind: RepKind) -> Self {
        match kind {
            RepKind::Directional => FeatureTag::LearnedDirectional,
            RepKind::Timing => FeatureTag::LearnedTiming,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureTag::ManualFeatures => "manual",
            FeatureTag::LearnedDirectional => "learned_directional",
            FeatureTag::LearnedTiming => "learned_timing",
            FeatureTag::Raw => "raw",
        }
    }

    /// Manual statistics live on wildly different scales and are z-scored
    /// before any distance computation.
    pub fn needs_standardization(self) -> bool {
        self == FeatureTag::ManualFeatures
    }
}

impl fmt::Display for FeatureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("data length {len} is not {rows} x {cols}")]
    Shape { len: usize, rows: usize, cols: usize },
    #[error("{labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
}

/// Row-major `n x d` matrix with aligned class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    tag: FeatureTag,
}

impl FeatureMatrix {
    pub fn new(
        data: Vec<f64>,
        cols: usize,
        labels: Vec<usize>,
        num_classes: usize,
        tag: FeatureTag,
    ) -> Result<Self, FeatureError> {
        let rows = labels.len();
        if data.len() != rows * cols {
            return Err(FeatureError::Shape {
                len: data.len(),
                rows,
                cols,
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(FeatureError::LabelRange {
                label,
                classes: num_classes,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(FeatureMatrix {
            rows,
            cols,
            data,
            labels,
            num_classes,
            tag,
        })
    }

    pub fn from_rows(
        rows: &[Vec<f64>],
        labels: Vec<usize>,
        num_classes: usize,
        tag: FeatureTag,
    ) -> Result<Self, FeatureError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if labels.len() != rows.len() {
            return Err(FeatureError::LabelCount {
                labels: labels.len(),
                rows: rows.len(),
            });
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(FeatureError::Shape {
                len: bad.len(),
                rows: 1,
                cols,
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(data, cols, labels, num_classes, tag)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tag(&self) -> FeatureTag {
        self.tag
    }

    pub fn with_tag(mut self, tag: FeatureTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        FeatureMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
            labels,
            num_classes: self.num_classes,
            tag: self.tag,
        }
    }

    /// Applies `x -> f(x)` row by row, producing `out_cols` columns.
    pub fn map_rows(&self, out_cols: usize, f: impl Fn(&[f64], &mut [f64])) -> Result<FeatureMatrix, FeatureError> {
        let mut data = vec![0.0; self.rows * out_cols];
        for i in 0..self.rows {
            f(self.row(i), &mut data[i * out_cols..(i + 1) * out_cols]);
        }
        Self::new(data, out_cols, self.labels.clone(), self.num_classes, self.tag)
    }
}

/// Per-column mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    pub fn fit(m: &FeatureMatrix) -> Self {
        let n = m.rows().max(1) as f64;
        let mut mean = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for (acc, v) in mean.iter_mut().zip(m.row(i)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for ((acc, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                *acc += (v - mu).powi(2);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        ZScore { mean, std }
    }

    /// Constant columns map to 0.
    pub fn apply(&self, m: &FeatureMatrix) -> FeatureMatrix {
        let cols = m.cols();
        m.map_rows(cols, |row, out| {
            for j in 0..cols {
                out[j] = if self.std[j] > 0.0 {
                    (row[j] - self.mean[j]) / self.std[j]
                } else {
                    0.0
                };
            }
        })
        .expect("z-scoring finite data stays finite")
    }
}
