use super::EstimatorError;

/// Shift point for the asymptotic series; the first omitted term is below
/// 2e-13 from here on.
const ASYMPTOTIC_FROM: f64 = 6.0;

/// Digamma function for `x > 0`.
///
/// Small arguments are shifted up with `psi(x) = psi(x + 1) - 1/x` and then
/// evaluated with the Bernoulli-number asymptotic expansion.
pub fn digamma(x: f64) -> Result<f64, EstimatorError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(EstimatorError::Domain(format!("digamma undefined for x = {x}")));
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < ASYMPTOTIC_FROM {
        shift += 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // B_2n / (2n), n = 1..7, applied as a polynomial in 1/x^2.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    Ok(x.ln() - 0.5 * inv - series - shift)
}

/// `digamma` for positive integer counts, which are always in the domain.
pub(crate) fn digamma_count(n: usize) -> f64 {
    digamma(n as f64).expect("count must be positive")
}
