//! Stratified fold construction.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::rng::{purpose, rng_from};

/// One fold: embedding-training indices and the two evaluation halves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<usize>,
    pub e1: Vec<usize>,
    pub e2: Vec<usize>,
}

impl Fold {
    /// E1 followed by E2.
    pub fn eval(&self) -> Vec<usize> {
        self.e1.iter().chain(&self.e2).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub num_folds: usize,
    /// Samples per class in each fold (half of it in each of E1 and E2).
    pub per_class_fold: Vec<usize>,
    /// Samples per class left out so every fold and half stays balanced.
    pub dropped: Vec<usize>,
    pub folds: Vec<Fold>,
}

/// Splits sample indices into `num_folds` stratified folds; each fold is
/// split into two equal-count halves per class. Per class, only
/// `floor(n / (2 num_folds)) * 2 num_folds` samples are used.
pub fn make_folds(labels: &[usize], class_names: &[String], num_folds: usize, seed: u64) -> Result<SplitPlan, PipelineError> {
    if num_folds < 2 {
        return Err(PipelineError::Config(format!("num_folds must be >= 2, got {num_folds}")));
    }
    let c = class_names.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        members
            .get_mut(l)
            .ok_or_else(|| PipelineError::Data(format!("label {l} out of range for {c} classes")))?
            .push(i);
    }
    let unit = 2 * num_folds;
    let mut folds: Vec<Fold> = (0..num_folds)
        .map(|index| Fold {
            index,
            train: Vec::new(),
            e1: Vec::new(),
            e2: Vec::new(),
        })
        .collect();
    let mut per_class_fold = Vec::with_capacity(c);
    let mut dropped = Vec::with_capacity(c);
    for (class, idx) in members.iter_mut().enumerate() {
        let usable = idx.len() / unit * unit;
        if usable == 0 {
            return Err(PipelineError::Data(format!(
                "class `{}` has {} samples, need at least {unit} for {num_folds} folds",
                class_names[class],
                idx.len()
            )));
        }
        if usable < idx.len() {
            log::info!(
                "class `{}`: dropping {} of {} samples to balance folds",
                class_names[class],
                idx.len() - usable,
                idx.len()
            );
        }
        idx.shuffle(&mut rng_from(seed, &[purpose::FOLDS, class as u64]));
        let block = usable / num_folds;
        per_class_fold.push(block);
        dropped.push(idx.len() - usable);
        for f in 0..num_folds {
            let part = &idx[f * block..(f + 1) * block];
            folds[f].e1.extend_from_slice(&part[..block / 2]);
            folds[f].e2.extend_from_slice(&part[block / 2..]);
            for (g, other) in folds.iter_mut().enumerate() {
                if g != f {
                    other.train.extend_from_slice(part);
                }
            }
        }
    }
    for f in &mut folds {
        f.train.sort_unstable();
        f.e1.sort_unstable();
        f.e2.sort_unstable();
    }
    Ok(SplitPlan {
        num_folds,
        per_class_fold,
        dropped,
        folds,
    })
}
