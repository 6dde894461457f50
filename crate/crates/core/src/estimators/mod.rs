//! kNN-based Bayes-error and mutual-information estimators.
//!
//! The BER estimate is the Cover–Hart lower bound applied to the 1-NN error,
//! minimised over feature transformations. The MI estimate is Ross' kNN
//! estimator for a discrete label against continuous features, maximised
//! over transformations.

mod digamma;
pub mod knn;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use digamma::digamma;
use digamma::digamma_count;
pub use knn::{Backend, KnnIndex, Neighbor};

use crate::features::{FeatureMatrix, FeatureTag, ZScore};

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("k = {k} exceeds the {n} available reference points")]
    KTooLarge { k: usize, n: usize },
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no test points")]
    EmptyTest,
    #[error("class {class} has a single sample; the MI estimator needs at least 2")]
    SingletonClass { class: usize },
    #[error("class {class} has {count} samples in evaluation half {half}, need at least 2")]
    ClassMissing { class: usize, half: usize, count: usize },
    #[error("no feature representations given")]
    NoRepresentations,
}

/// Fraction of `test` rows misclassified by a k-NN majority vote over
/// `train`. Vote ties go to the lowest class index.
pub fn knn_error(train: &FeatureMatrix, test: &FeatureMatrix, k: usize) -> Result<f64, EstimatorError> {
    knn_error_with(train, test, k, Backend::Auto)
}

pub fn knn_error_with(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    k: usize,
    backend: Backend,
) -> Result<f64, EstimatorError> {
    if train.cols() != test.cols() {
        return Err(EstimatorError::DimensionMismatch(train.cols(), test.cols()));
    }
    if test.rows() == 0 {
        return Err(EstimatorError::EmptyTest);
    }
    if k == 0 || k > train.rows() {
        return Err(EstimatorError::KTooLarge { k, n: train.rows() });
    }
    let classes = train.num_classes().max(test.num_classes());
    let index = KnnIndex::build(train.data().to_vec(), train.cols(), backend);
    let wrong: usize = (0..test.rows())
        .into_par_iter()
        .map(|i| {
            let mut votes = vec![0usize; classes];
            for n in index.k_nearest(test.row(i), k, None) {
                votes[train.labels()[n.index]] += 1;
            }
            // max_by_key returns the last maximum; scan in reverse so the
            // lowest class index wins ties.
            let predicted = votes
                .iter()
                .enumerate()
                .rev()
                .max_by_key(|(_, &v)| v)
                .map_or(0, |(c, _)| c);
            usize::from(predicted != test.labels()[i])
        })
        .sum();
    Ok(wrong as f64 / test.rows() as f64)
}

/// Cover–Hart transform of a 1-NN error into a Bayes-error lower bound. The
/// square-root argument is clamped at 0 for finite-sample errors above
/// `(C-1)/C`.
pub fn cover_hart_lower(error: f64, num_classes: usize) -> f64 {
    let c = num_classes as f64;
    let inner = (1.0 - c * error / (c - 1.0)).max(0.0);
    error / (1.0 + inner.sqrt())
}

/// Row indices (into each feature matrix) of the two evaluation halves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub e1: Vec<usize>,
    pub e2: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepBer {
    pub tag: FeatureTag,
    pub e1_to_e2: f64,
    pub e2_to_e1: f64,
    /// Mean 1-NN error over both directions.
    pub knn_error: f64,
    pub lower_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerEstimate {
    pub num_classes: usize,
    pub per_rep: Vec<RepBer>,
    /// Minimum lower bound over representations.
    pub aggregate: f64,
    pub best: FeatureTag,
}

impl BerEstimate {
    /// 1-NN error of the representation attaining the aggregate.
    pub fn knn_error(&self) -> f64 {
        self.per_rep
            .iter()
            .find(|r| r.tag == self.best)
            .map_or(f64::NAN, |r| r.knn_error)
    }
}

fn check_halves(m: &FeatureMatrix, split: &EvalSplit) -> Result<(), EstimatorError> {
    for (half, idx) in [(1, &split.e1), (2, &split.e2)] {
        let mut counts = vec![0usize; m.num_classes()];
        for &i in idx.iter() {
            counts[m.labels()[i]] += 1;
        }
        if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &n)| n < 2) {
            return Err(EstimatorError::ClassMissing { class, half, count });
        }
    }
    Ok(())
}

/// Extracts one half, z-scoring with statistics of `fit_on` when the
/// representation needs it.
fn half(m: &FeatureMatrix, idx: &[usize], fit_on: &FeatureMatrix) -> FeatureMatrix {
    let sel = m.select(idx);
    if m.tag().needs_standardization() {
        ZScore::fit(fit_on).apply(&sel)
    } else {
        sel
    }
}

/// Per representation: 1-NN error trained on E1 and tested on E2 and vice
/// versa, averaged, then Cover–Hart transformed. The aggregate is the
/// minimum over representations, clamped to `[0, (C-1)/C]`.
pub fn estimate_ber(reps: &[FeatureMatrix], split: &EvalSplit, backend: Backend) -> Result<BerEstimate, EstimatorError> {
    let first = reps.first().ok_or(EstimatorError::NoRepresentations)?;
    let num_classes = first.num_classes();
    let ceiling = (num_classes as f64 - 1.0) / num_classes as f64;
    let mut per_rep = Vec::with_capacity(reps.len());
    for m in reps {
        check_halves(m, split)?;
        let raw1 = m.select(&split.e1);
        let raw2 = m.select(&split.e2);
        let forward = knn_error_with(&half(m, &split.e1, &raw1), &half(m, &split.e2, &raw1), 1, backend)?;
        let backward = knn_error_with(&half(m, &split.e2, &raw2), &half(m, &split.e1, &raw2), 1, backend)?;
        let err = 0.5 * (forward + backward);
        per_rep.push(RepBer {
            tag: m.tag(),
            e1_to_e2: forward,
            e2_to_e1: backward,
            knn_error: err,
            lower_bound: cover_hart_lower(err, num_classes).clamp(0.0, ceiling),
        });
    }
    let best = per_rep
        .iter()
        .min_by(|a, b| a.lower_bound.total_cmp(&b.lower_bound))
        .expect("non-empty");
    Ok(BerEstimate {
        num_classes,
        aggregate: best.lower_bound,
        best: best.tag,
        per_rep,
    })
}

/// Result of one Ross MI evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RossMi {
    /// Estimate in bits, clamped to `[0, log2 C]`.
    pub bits: f64,
    pub raw_bits: f64,
    pub clamped: bool,
    pub k: usize,
    /// Samples whose class was too small for `k` neighbours.
    pub reduced_k_samples: usize,
}

/// Per-sample statistics of the Ross estimator: `(min(k, N_y - 1), k_i, m_i)`.
fn ross_counts(m: &FeatureMatrix, k: usize, backend: Backend) -> Result<Vec<(usize, usize, usize)>, EstimatorError> {
    let counts = m.class_counts();
    if let Some(class) = counts.iter().position(|&n| n == 1) {
        return Err(EstimatorError::SingletonClass { class });
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); m.num_classes()];
    let mut local = vec![0usize; m.rows()];
    for (i, &l) in m.labels().iter().enumerate() {
        local[i] = members[l].len();
        members[l].push(i);
    }
    let class_index: Vec<KnnIndex> = members
        .iter()
        .map(|rows| {
            let data = rows.iter().flat_map(|&i| m.row(i).iter().copied()).collect();
            KnnIndex::build(data, m.cols(), backend)
        })
        .collect();
    let global = KnnIndex::build(m.data().to_vec(), m.cols(), backend);

    Ok((0..m.rows())
        .into_par_iter()
        .map(|i| {
            let label = m.labels()[i];
            let k_base = k.min(counts[label] - 1);
            let nn = class_index[label].k_nearest(m.row(i), k_base, Some(local[i]));
            let radius2 = nn.last().map_or(0.0, |n| n.dist2);
            let k_i = class_index[label].count_within(m.row(i), radius2, Some(local[i]));
            let m_i = global.count_within(m.row(i), radius2, Some(i));
            (k_base, k_i, m_i)
        })
        .collect())
}

/// Ross' kNN estimate of I(features; label).
///
/// For sample `i` with class size `N_y`, `d_i` is the distance to its
/// `min(k, N_y - 1)`-th nearest same-class neighbour. Both counts are
/// inclusive: `k_i` is the number of other same-class samples within `d_i`
/// (equal to `min(k, N_y - 1)` unless there are ties at `d_i`) and `m_i`
/// the number of other samples of any class within `d_i`. The estimate is
/// `psi(N) - <psi(N_y)> + <psi(k_i)> - <psi(m_i)>`, averaged over samples,
/// converted to bits and clamped to `[0, log2 C]`.
pub fn ross_mi(m: &FeatureMatrix, k: usize, backend: Backend) -> Result<RossMi, EstimatorError> {
    if k == 0 {
        return Err(EstimatorError::Domain("k must be >= 1".into()));
    }
    let n = m.rows();
    if n < 2 {
        return Err(EstimatorError::EmptyTest);
    }
    let counts = m.class_counts();
    let stats = ross_counts(m, k, backend)?;
    let nf = n as f64;
    let mut class_term = 0.0;
    let mut k_term = 0.0;
    let mut m_term = 0.0;
    let mut reduced = 0;
    for (i, &(k_base, k_i, m_i)) in stats.iter().enumerate() {
        class_term += digamma_count(counts[m.labels()[i]]);
        k_term += digamma_count(k_i);
        m_term += digamma_count(m_i);
        if k_base < k {
            reduced += 1;
        }
    }
    let nats = digamma_count(n) - class_term / nf + k_term / nf - m_term / nf;
    let raw_bits = nats * std::f64::consts::LOG2_E;
    let ceiling = (m.num_classes() as f64).log2();
    let bits = raw_bits.clamp(0.0, ceiling);
    Ok(RossMi {
        bits,
        raw_bits,
        clamped: bits != raw_bits,
        k,
        reduced_k_samples: reduced,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepMi {
    pub tag: FeatureTag,
    pub e1_bits: f64,
    pub e2_bits: f64,
    /// Mean of the two halves.
    pub bits: f64,
    pub clamped: bool,
    pub reduced_k_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub k: usize,
    pub per_rep: Vec<RepMi>,
    /// Maximum over representations, in bits.
    pub aggregate: f64,
    pub best: FeatureTag,
}

/// Ross MI on E1 and on E2 separately, averaged per representation; the
/// aggregate is the maximum over representations.
pub fn estimate_mi(reps: &[FeatureMatrix], split: &EvalSplit, k: usize, backend: Backend) -> Result<MiEstimate, EstimatorError> {
    if reps.is_empty() {
        return Err(EstimatorError::NoRepresentations);
    }
    let mut per_rep = Vec::with_capacity(reps.len());
    for m in reps {
        check_halves(m, split)?;
        let e1 = m.select(&split.e1);
        let e2 = m.select(&split.e2);
        let a = ross_mi(&half(m, &split.e1, &e1), k, backend)?;
        let b = ross_mi(&half(m, &split.e2, &e2), k, backend)?;
        per_rep.push(RepMi {
            tag: m.tag(),
            e1_bits: a.bits,
            e2_bits: b.bits,
            bits: 0.5 * (a.bits + b.bits),
            clamped: a.clamped || b.clamped,
            reduced_k_samples: a.reduced_k_samples + b.reduced_k_samples,
        });
    }
    let best = per_rep
        .iter()
        .max_by(|a, b| a.bits.total_cmp(&b.bits).then(b.tag.cmp(&a.tag)))
        .expect("non-empty");
    Ok(MiEstimate {
        k,
        aggregate: best.bits,
        best: best.tag,
        per_rep,
    })
}
