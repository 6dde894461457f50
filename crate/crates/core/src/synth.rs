//! Synthetic datasets whose Bayes error and mutual information are known
//! analytically, by quadrature or by exhaustive enumeration.
//!
//! All variants use equal class priors.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::features::{FeatureMatrix, FeatureTag};
use crate::rng::{self, purpose};
use crate::traces::{Dataset, Direction, Trace, TraceEvent};

/// Template traces up to this length get exact oracles.
pub const ENUMERATION_MAX_LEN: usize = 12;
pub const MONTE_CARLO_DRAWS: usize = 1_000_000;
const MONTE_CARLO_STREAMS: usize = 16;
const QUADRATURE_TOL_NATS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum SynthVariant {
    /// One-dimensional Gaussians with a shared standard deviation.
    Gaussian1d { means: Vec<f64>, sigma: f64 },
    /// Class `c` is uniform on the unit box centred at `(c * gap, 0, ..)`.
    /// Any `gap > 1` gives disjoint supports.
    SeparatedClusters { classes: usize, dim: usize, gap: f64 },
    /// Per-class direction templates with i.i.d. sign flips and unit
    /// inter-packet times. The first packet is always outgoing.
    TemplateTraces {
        classes: usize,
        flip_prob: f64,
        trace_len: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(flatten)]
    pub variant: SynthVariant,
    pub samples_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        match &self.variant {
            SynthVariant::Gaussian1d { means, .. } => means.len(),
            SynthVariant::SeparatedClusters { classes, .. } | SynthVariant::TemplateTraces { classes, .. } => *classes,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |s: String| Err(SynthError::Invalid(s));
        if self.num_classes() < 2 {
            return bad("need at least 2 classes".into());
        }
        match &self.variant {
            SynthVariant::Gaussian1d { means, sigma } => {
                if !(*sigma > 0.0 && sigma.is_finite()) || means.iter().any(|m| !m.is_finite()) {
                    return bad("gaussian needs finite means and sigma > 0".into());
                }
            }
            SynthVariant::SeparatedClusters { dim, gap, .. } => {
                if *dim < 1 || !gap.is_finite() {
                    return bad("clusters need dim >= 1 and a finite gap".into());
                }
            }
            SynthVariant::TemplateTraces {
                classes,
                flip_prob,
                trace_len,
            } => {
                if !(0.0..=0.5).contains(flip_prob) {
                    return bad(format!("flip_prob {flip_prob} outside [0, 0.5]"));
                }
                if *trace_len < 2 {
                    return bad("trace_len must be >= 2".into());
                }
                let patterns = 1u128 << (trace_len - 1).min(100);
                if (*classes as u128) > patterns {
                    return bad(format!("{classes} distinct templates do not fit in length {trace_len}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub features: FeatureMatrix,
    /// Present for the template-trace variant.
    pub traces: Option<Dataset>,
}

/// Distinct class templates as direction signs; position 0 is `+1`.
pub fn templates(spec: &SynthSpec) -> Result<Vec<Vec<f64>>, SynthError> {
    spec.validate()?;
    let SynthVariant::TemplateTraces { classes, trace_len, .. } = spec.variant else {
        return Err(SynthError::Invalid("not a template-trace spec".into()));
    };
    let mut rng = rng::rng_from(spec.seed, &[purpose::SYNTH, 0]);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while out.len() < classes {
        let mut t = vec![1.0; trace_len];
        for v in t.iter_mut().skip(1) {
            *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        if !out.contains(&t) {
            out.push(t);
        }
    }
    Ok(out)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData, SynthError> {
    spec.validate()?;
    let mut rng = rng::rng_from(spec.seed, &[purpose::SYNTH, 1]);
    let per = spec.samples_per_class;
    let c = spec.num_classes();
    let labels: Vec<usize> = (0..c).flat_map(|l| std::iter::repeat_n(l, per)).collect();
    let invalid = |e: crate::features::FeatureError| SynthError::Invalid(e.to_string());
    match &spec.variant {
        SynthVariant::Gaussian1d { means, sigma } => {
            let mut data = Vec::with_capacity(c * per);
            for &mu in means {
                let normal = Normal::new(mu, *sigma).map_err(|e| SynthError::Invalid(e.to_string()))?;
                data.extend((0..per).map(|_| normal.sample(&mut rng)));
            }
            Ok(SynthData {
                features: FeatureMatrix::new(data, 1, labels, c, FeatureTag::Raw).map_err(invalid)?,
                traces: None,
            })
        }
        SynthVariant::SeparatedClusters { dim, gap, .. } => {
            let mut data = Vec::with_capacity(c * per * dim);
            for class in 0..c {
                for _ in 0..per {
                    data.push(class as f64 * gap + rng.random_range(-0.5..0.5));
                    data.extend((1..*dim).map(|_| rng.random_range(-0.5..0.5)));
                }
            }
            Ok(SynthData {
                features: FeatureMatrix::new(data, *dim, labels, c, FeatureTag::Raw).map_err(invalid)?,
                traces: None,
            })
        }
        SynthVariant::TemplateTraces {
            flip_prob,
            trace_len,
            ..
        } => {
            let temps = templates(spec)?;
            let mut data = Vec::with_capacity(c * per * trace_len);
            let mut traces = Vec::with_capacity(c * per);
            for (class, template) in temps.iter().enumerate() {
                for _ in 0..per {
                    let mut events = Vec::with_capacity(*trace_len);
                    for (pos, &sign) in template.iter().enumerate() {
                        let flip = pos > 0 && rng.random_bool(*flip_prob);
                        let s = if flip { -sign } else { sign };
                        data.push(s);
                        events.push(TraceEvent::real(pos as f64, Direction::from_sign(s)));
                    }
                    traces.push(Trace::new(events, class));
                }
            }
            Ok(SynthData {
                features: FeatureMatrix::new(data, *trace_len, labels, c, FeatureTag::Raw).map_err(invalid)?,
                traces: Some(Dataset::with_numbered_classes(traces, c)),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum OracleMethod {
    Exact,
    Quadrature,
    MonteCarlo { std_err: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub value: f64,
    pub method: OracleMethod,
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Adaptive Simpson on panels of width `panel`, so narrow peaks inside a
/// wide range are never skipped by the first coarse estimate.
fn integrate_panels(f: &dyn Fn(f64) -> f64, a: f64, b: f64, panel: f64, tol: f64) -> f64 {
    let n = ((b - a) / panel).ceil().max(1.0) as usize;
    let width = (b - a) / n as f64;
    (0..n)
        .map(|i| {
            let lo = a + i as f64 * width;
            adaptive_simpson(f, lo, lo + width, tol / n as f64)
        })
        .sum()
}

fn gaussian_log_densities(means: &[f64], sigma: f64, x: f64, out: &mut [f64]) {
    let norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    for (o, mu) in out.iter_mut().zip(means) {
        let z = (x - mu) / sigma;
        *o = norm - 0.5 * z * z;
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn gaussian_span(means: &[f64], sigma: f64) -> (f64, f64) {
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo - 10.0 * sigma, hi + 10.0 * sigma)
}

fn template_likelihood(temp: &[f64], pattern: &[f64], p: f64) -> f64 {
    let flips = temp.iter().zip(pattern).skip(1).filter(|(a, b)| a != b).count();
    let n = (temp.len() - 1) as i32;
    p.powi(flips as i32) * (1.0 - p).powi(n - flips as i32)
}

/// (BER, MI bits) of template traces by enumerating all patterns.
fn template_exact(temps: &[Vec<f64>], p: f64) -> (f64, f64) {
    let len = temps[0].len();
    let c = temps.len() as f64;
    let mut success = 0.0;
    let mut mi = 0.0;
    let mut pattern = vec![1.0; len];
    let mut lik = vec![0.0; temps.len()];
    for bits in 0u64..(1 << (len - 1)) {
        for (j, v) in pattern.iter_mut().enumerate().skip(1) {
            *v = if bits >> (j - 1) & 1 == 1 { -1.0 } else { 1.0 };
        }
        for (l, t) in lik.iter_mut().zip(temps) {
            *l = template_likelihood(t, &pattern, p);
        }
        let total: f64 = lik.iter().sum();
        success += lik.iter().copied().fold(0.0, f64::max) / c;
        for &l in &lik {
            if l > 0.0 {
                mi += l / c * (c * l / total).log2();
            }
        }
    }
    (1.0 - success, mi)
}

/// Monte-Carlo (BER, MI bits) with standard errors, for any variant whose
/// class posterior is computable pointwise.
fn monte_carlo(spec: &SynthSpec, draws: usize) -> Result<((f64, f64), (f64, f64)), SynthError> {
    let c = spec.num_classes();
    let temps = match spec.variant {
        SynthVariant::TemplateTraces { .. } => Some(templates(spec)?),
        _ => None,
    };
    let per_stream = draws.div_ceil(MONTE_CARLO_STREAMS);
    let sums: Vec<[f64; 4]> = (0..MONTE_CARLO_STREAMS)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng::rng_from(spec.seed, &[purpose::MONTE_CARLO, s as u64]);
            let mut acc = [0.0; 4];
            let mut lik = vec![0.0; c];
            for _ in 0..per_stream {
                let class = rng.random_range(0..c);
                match &spec.variant {
                    SynthVariant::TemplateTraces { flip_prob, .. } => {
                        let temps = temps.as_ref().expect("templates");
                        let pattern: Vec<f64> = temps[class]
                            .iter()
                            .enumerate()
                            .map(|(j, &v)| if j > 0 && rng.random_bool(*flip_prob) { -v } else { v })
                            .collect();
                        for (l, t) in lik.iter_mut().zip(temps) {
                            *l = template_likelihood(t, &pattern, *flip_prob);
                        }
                    }
                    SynthVariant::SeparatedClusters { gap, .. } => {
                        // Only the first axis separates classes.
                        let x = class as f64 * gap + rng.random_range(-0.5..0.5);
                        for (k, l) in lik.iter_mut().enumerate() {
                            *l = if (x - k as f64 * gap).abs() <= 0.5 { 1.0 } else { 0.0 };
                        }
                    }
                    SynthVariant::Gaussian1d { means, sigma } => {
                        let x = means[class] + sigma * { let z: f64 = rand_distr::StandardNormal.sample(&mut rng); z };
                        gaussian_log_densities(means, *sigma, x, &mut lik);
                        let m = lik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        lik.iter_mut().for_each(|v| *v = (*v - m).exp());
                    }
                }
                let total: f64 = lik.iter().sum();
                let err = 1.0 - lik.iter().copied().fold(0.0, f64::max) / total;
                let info = (c as f64 * lik[class] / total).log2();
                acc[0] += err;
                acc[1] += err * err;
                acc[2] += info;
                acc[3] += info * info;
            }
            acc
        })
        .collect();
    let n = (per_stream * MONTE_CARLO_STREAMS) as f64;
    let mut tot = [0.0; 4];
    for s in &sums {
        for (t, v) in tot.iter_mut().zip(s) {
            *t += v;
        }
    }
    let stat = |sum: f64, sq: f64| {
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0);
        (mean, (var / n).sqrt())
    };
    Ok((stat(tot[0], tot[1]), stat(tot[2], tot[3])))
}

/// Bayes error of the generating distribution.
pub fn oracle_ber(spec: &SynthSpec) -> Result<Oracle, SynthError> {
    spec.validate()?;
    match &spec.variant {
        SynthVariant::Gaussian1d { means, sigma } if means.len() == 2 => Ok(Oracle {
            value: std_normal_cdf(-(means[0] - means[1]).abs() / (2.0 * sigma)),
            method: OracleMethod::Exact,
        }),
        SynthVariant::Gaussian1d { means, sigma } => {
            let c = means.len() as f64;
            let (a, b) = gaussian_span(means, *sigma);
            let best = |x: f64| {
                let mut logs = vec![0.0; means.len()];
                gaussian_log_densities(means, *sigma, x, &mut logs);
                logs.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp() / c
            };
            Ok(Oracle {
                value: 1.0 - integrate_panels(&best, a, b, *sigma, 1e-9),
                method: OracleMethod::Quadrature,
            })
        }
        SynthVariant::SeparatedClusters { gap, .. } if *gap > 1.0 => Ok(Oracle {
            value: 0.0,
            method: OracleMethod::Exact,
        }),
        SynthVariant::TemplateTraces { trace_len, flip_prob, .. } if *trace_len <= ENUMERATION_MAX_LEN => Ok(Oracle {
            value: template_exact(&templates(spec)?, *flip_prob).0,
            method: OracleMethod::Exact,
        }),
        _ => {
            let ((v, se), _) = monte_carlo(spec, MONTE_CARLO_DRAWS)?;
            Ok(Oracle {
                value: v,
                method: OracleMethod::MonteCarlo { std_err: se },
            })
        }
    }
}

/// I(features; label) of the generating distribution, in bits.
pub fn oracle_mi(spec: &SynthSpec) -> Result<Oracle, SynthError> {
    spec.validate()?;
    match &spec.variant {
        SynthVariant::Gaussian1d { means, sigma } => {
            let c = means.len() as f64;
            let (a, b) = gaussian_span(means, *sigma);
            let integrand = |x: f64| {
                let mut logs = vec![0.0; means.len()];
                gaussian_log_densities(means, *sigma, x, &mut logs);
                let log_mix = log_sum_exp(&logs) - c.ln();
                logs.iter().map(|&l| l.exp() / c * (l - log_mix)).sum::<f64>()
            };
            Ok(Oracle {
                value: integrate_panels(&integrand, a, b, *sigma, QUADRATURE_TOL_NATS) * std::f64::consts::LOG2_E,
                method: OracleMethod::Quadrature,
            })
        }
        SynthVariant::SeparatedClusters { classes, gap, .. } if *gap > 1.0 => Ok(Oracle {
            value: (*classes as f64).log2(),
            method: OracleMethod::Exact,
        }),
        SynthVariant::TemplateTraces { trace_len, flip_prob, .. } if *trace_len <= ENUMERATION_MAX_LEN => Ok(Oracle {
            value: template_exact(&templates(spec)?, *flip_prob).1,
            method: OracleMethod::Exact,
        }),
        _ => {
            let (_, (v, se)) = monte_carlo(spec, MONTE_CARLO_DRAWS)?;
            Ok(Oracle {
                value: v,
                method: OracleMethod::MonteCarlo { std_err: se },
            })
        }
    }
}
