//! Fano and Kovalevskij bounds tying the Bayes error to the mutual
//! information between page label and trace, under a uniform prior over `C`
//! pages (so `H(W) = log2 C`).

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{BerEstimate, MiEstimate};

#[derive(Debug, Error, PartialEq)]
pub enum BoundsError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("BER {ber} outside [0, {max}]")]
    OutOfRange { ber: f64, max: f64 },
}

/// Binary entropy in bits, with `0 log 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    term(p) + term(1.0 - p)
}

fn max_error(num_classes: usize) -> f64 {
    (num_classes as f64 - 1.0) / num_classes as f64
}

fn check(ber: f64, num_classes: usize) -> Result<(), BoundsError> {
    if num_classes < 2 {
        return Err(BoundsError::TooFewClasses(num_classes));
    }
    let max = max_error(num_classes);
    // Allow rounding noise at the uniform endpoint.
    if !(ber >= 0.0 && ber <= max + 1e-12) {
        return Err(BoundsError::OutOfRange { ber, max });
    }
    Ok(())
}

/// Fano lower bound on I(W; T) in bits.
pub fn fano_lower(ber: f64, num_classes: usize) -> Result<f64, BoundsError> {
    check(ber, num_classes)?;
    let c = num_classes as f64;
    let raw = c.log2() - binary_entropy(ber) - ber * (c - 1.0).log2();
    // At the uniform endpoint the terms cancel only up to rounding.
    Ok(if raw <= 8.0 * f64::EPSILON * c.log2() { 0.0 } else { raw })
}

/// Kovalevskij upper bound without the final clamp.
pub fn kovalevskij_raw(ber: f64, num_classes: usize) -> Result<f64, BoundsError> {
    check(ber, num_classes)?;
    let h = (num_classes as f64).log2();
    Ok((2..=num_classes)
        .map(|k| {
            let k = k as f64;
            h - k.log2() - k * (k + 1.0) * ((k + 1.0) / k).log2() * (ber - (k - 1.0) / k)
        })
        .fold(f64::INFINITY, f64::min))
}

/// Kovalevskij upper bound on I(W; T) in bits, clamped to `[0, log2 C]`.
pub fn kovalevskij_upper(ber: f64, num_classes: usize) -> Result<f64, BoundsError> {
    let raw = kovalevskij_raw(ber, num_classes)?;
    Ok(raw.clamp(0.0, (num_classes as f64).log2()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Consistency {
    Consistent,
    MiBelowFano { gap_bits: f64 },
    MiAboveKovalevskij { gap_bits: f64 },
}

/// Slack absorbing floating-point noise when comparing against a bound.
const BOUND_TOL: f64 = 1e-9;

/// Places an MI value against the bounds evaluated at a BER value. BER
/// values past `(C-1)/C` are clipped to it first.
pub fn classify(ber: f64, mi_bits: f64, num_classes: usize) -> Result<Consistency, BoundsError> {
    let ber = ber.min(max_error(num_classes));
    let lower = fano_lower(ber, num_classes)?;
    let upper = kovalevskij_upper(ber, num_classes)?;
    Ok(if mi_bits < lower - BOUND_TOL {
        Consistency::MiBelowFano {
            gap_bits: lower - mi_bits,
        }
    } else if mi_bits > upper + BOUND_TOL {
        Consistency::MiAboveKovalevskij {
            gap_bits: mi_bits - upper,
        }
    } else {
        Consistency::Consistent
    })
}

/// Checks the aggregate (min-BER, max-MI) pair of one run.
pub fn check_consistency(ber: &BerEstimate, mi: &MiEstimate, num_classes: usize) -> Result<Consistency, BoundsError> {
    classify(ber.aggregate, mi.aggregate, num_classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub ber: f64,
    pub fano_bits: f64,
    pub kovalevskij_bits: f64,
}

/// The feasible BER/MI region sampled on an evenly spaced BER grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRegion {
    pub num_classes: usize,
    pub points: Vec<BoundPoint>,
}

impl BoundRegion {
    pub fn grid(num_classes: usize, points: usize) -> Result<Self, BoundsError> {
        if num_classes < 2 {
            return Err(BoundsError::TooFewClasses(num_classes));
        }
        let max = max_error(num_classes);
        let n = points.max(2);
        let points = (0..n)
            .map(|i| {
                let ber = if i + 1 == n { max } else { max * i as f64 / (n - 1) as f64 };
                Ok(BoundPoint {
                    ber,
                    fano_bits: fano_lower(ber, num_classes)?,
                    kovalevskij_bits: kovalevskij_upper(ber, num_classes)?,
                })
            })
            .collect::<Result<_, BoundsError>>()?;
        Ok(BoundRegion { num_classes, points })
    }

    /// CSV with columns `R,fano_bits,kovalevskij_bits`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "R,fano_bits,kovalevskij_bits")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.ber, p.fano_bits, p.kovalevskij_bits)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_entropy_values() {
        assert_eq!(binary_entropy(0.0), 0.0);
        assert_eq!(binary_entropy(1.0), 0.0);
        assert_eq!(binary_entropy(0.5), 1.0);
        assert!((binary_entropy(0.2) - 0.721_928_094_887_362_3).abs() < 1e-12);
    }

    #[test]
    fn fano_values() {
        assert!((fano_lower(0.0, 100).unwrap() - 100f64.log2()).abs() < 1e-12);
        assert!((fano_lower(0.2, 2).unwrap() - 0.278_071_905_112_637_7).abs() < 1e-12);
        for c in 2..200 {
            assert_eq!(fano_lower(max_error(c), c).unwrap(), 0.0, "C={c}");
        }
        assert!(fano_lower(0.6, 2).is_err());
        assert!(fano_lower(-0.1, 2).is_err());
    }

    #[test]
    fn kovalevskij_values() {
        assert!(kovalevskij_upper(0.5, 2).unwrap().abs() < 1e-12);
        let raw = kovalevskij_raw(0.0, 100).unwrap();
        let k2 = 100f64.log2() - 1.0 + 3.0 * 1.5f64.log2();
        assert!((raw - k2).abs() < 1e-12);
        assert!((raw - 7.3988).abs() < 1e-4);
        assert!((kovalevskij_upper(0.0, 100).unwrap() - 100f64.log2()).abs() < 1e-12);
        for c in 2..50 {
            assert!(kovalevskij_upper(max_error(c), c).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn consistency_corners() {
        let c = 10;
        assert_eq!(classify(0.0, 10f64.log2(), c).unwrap(), Consistency::Consistent);
        assert_eq!(classify(0.9, 0.0, c).unwrap(), Consistency::Consistent);
        match classify(0.5, 0.9, 2).unwrap() {
            Consistency::MiAboveKovalevskij { gap_bits } => assert!((gap_bits - 0.9).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(classify(0.0, 1.0, 4).unwrap(), Consistency::MiBelowFano { .. }));
    }

    #[test]
    fn region_grid_and_csv() {
        let r = BoundRegion::grid(5, 400).unwrap();
        assert_eq!(r.points.len(), 400);
        assert_eq!(r.points[399].ber, 0.8);
        assert!(r.points.iter().all(|p| p.fano_bits <= p.kovalevskij_bits));
        let mut a = Vec::new();
        let mut b = Vec::new();
        r.write_csv(&mut a).unwrap();
        BoundRegion::grid(5, 400).unwrap().write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 401);
    }

    proptest::proptest! {
        #[test]
        fn fano_never_exceeds_kovalevskij(c in 2usize..300, t in 0.0f64..=1.0) {
            let ber = t * max_error(c);
            proptest::prop_assert!(fano_lower(ber, c).unwrap() <= kovalevskij_upper(ber, c).unwrap());
        }
    }
}
