//! Finite-difference verification of the analytic gradients.

use rand::seq::index::sample;

use super::{batch_gradient, check_labels, EmbeddingError, EmbeddingModel};
use crate::rng::{purpose, rng_from};
use crate::traces::RepVector;

const STEP: f64 = 1e-4;
const MIN_CHECKED: usize = 200;
/// Keeps the relative error meaningful for gradients that are numerically zero.
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub checked: usize,
}

/// Compares analytic gradients of the mean batch loss against central
/// differences on a copy of the batch normalised to unit max magnitude.
pub fn gradient_check(
    model: &EmbeddingModel,
    batch: &[RepVector],
    labels: &[usize],
    seed: u64,
) -> Result<GradientCheck, EmbeddingError> {
    gradient_check_with(model, batch, labels, seed, |_| {})
}

/// As [`gradient_check`], letting `tamper` alter the analytic gradient
/// before comparison.
pub fn gradient_check_with(
    model: &EmbeddingModel,
    batch: &[RepVector],
    labels: &[usize],
    seed: u64,
    tamper: impl FnOnce(&mut [f64]),
) -> Result<GradientCheck, EmbeddingError> {
    check_labels(batch.len(), labels, model.num_classes)?;
    if batch.is_empty() {
        return Err(EmbeddingError::Empty);
    }
    let mut inputs = model.prepare_all(batch)?;
    let max = inputs
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        inputs.iter_mut().flatten().for_each(|v| *v /= max);
    }
    let idx: Vec<usize> = (0..inputs.len()).collect();
    let n = inputs.len() as f64;
    let mean_loss = |params: &[f64]| batch_gradient(&model.net, params, &inputs, labels, &idx).0 / n;

    let (_, mut analytic) = batch_gradient(&model.net, &model.params, &inputs, labels, &idx);
    analytic.iter_mut().for_each(|g| *g /= n);
    tamper(&mut analytic);

    let total = model.params.len();
    let mut rng = rng_from(seed, &[purpose::GRADIENT_CHECK]);
    let chosen: Vec<usize> = if total <= MIN_CHECKED {
        (0..total).collect()
    } else {
        let mut v = sample(&mut rng, total, MIN_CHECKED).into_vec();
        v.sort_unstable();
        v
    };

    let mut params = model.params.clone();
    let mut worst = 0.0f64;
    for &p in &chosen {
        let orig = params[p];
        params[p] = orig + STEP;
        let up = mean_loss(&params);
        params[p] = orig - STEP;
        let down = mean_loss(&params);
        params[p] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[p];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
        worst = worst.max(rel);
    }
    Ok(GradientCheck {
        max_relative_error: worst,
        checked: chosen.len(),
    })
}
