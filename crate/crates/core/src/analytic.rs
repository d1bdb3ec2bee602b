//! Closed-form quantities for two-arm designs and binary outcomes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sequence;

/// Correlation of cluster-period means, `E = mT rho / (1 + (mT - 1) rho)`.
pub fn cluster_mean_correlation(m: usize, periods: usize, rho: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!("rho must lie in [0, 1], got {rho}")));
    }
    let n = (m * periods) as f64;
    Ok(n * rho / (1.0 + (n - 1.0) * rho))
}

/// Inverse of [`cluster_mean_correlation`] in `rho`.
pub fn rho_from_e(m: usize, periods: usize, e: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&e) {
        return Err(Error::Domain(format!("E must lie in [0, 1], got {e}")));
    }
    let n = (m * periods) as f64;
    if n <= 0.0 {
        return Err(Error::Domain("m T must be positive".into()));
    }
    Ok(e / (n - (n - 1.0) * e))
}

/// `F = 1 / (1 - sqrt(E))`, the optimal number of distinct sequences under
/// equal allocation.
pub fn optimal_sequence_count(e: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&e) {
        return Err(Error::Domain(format!("E must lie in [0, 1), got {e}")));
    }
    Ok(1.0 / (1.0 - e.sqrt()))
}

/// Optimal proportions of clusters on the sequence with `t` trailing ones,
/// `t = 1, ..., T - 1`, for a two-arm start-on-control end-on-treatment design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortProportions {
    pub p: Vec<f64>,
    pub psi: f64,
    pub xi: f64,
    pub gamma: f64,
}

/// Continuous optimum of the proportions `p_t` under a cohort model with
/// correlations `rho0`, `rho1`, `rho2`.
///
/// `psi = 1 + (m-1) rho0 - (m-1) rho1 - rho2`, `xi = (m-1) rho1 + rho2`,
/// `gamma = psi + T xi`; the two extreme sequences get `(psi + 3 xi) / (2 gamma)`
/// and every other one `xi / gamma`.
pub fn cohort_optimal_proportions(m: usize, periods: usize, rho0: f64, rho1: f64, rho2: f64) -> Result<CohortProportions> {
    for (name, r) in [("rho0", rho0), ("rho1", rho1), ("rho2", rho2)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Domain(format!("{name} must lie in [0, 1], got {r}")));
        }
    }
    if periods < 3 {
        return Err(Error::Domain(format!("need T >= 3, got {periods}")));
    }
    let k = m as f64 - 1.0;
    let psi = 1.0 + k * rho0 - k * rho1 - rho2;
    let xi = k * rho1 + rho2;
    let gamma = psi + periods as f64 * xi;
    if gamma.abs() < f64::EPSILON {
        return Err(Error::Domain("gamma is zero".into()));
    }
    let end = (psi + 3.0 * xi) / (2.0 * gamma);
    let mut p = vec![xi / gamma; periods - 1];
    p[0] = end;
    p[periods - 2] = end;
    Ok(CohortProportions { p, psi, xi, gamma })
}

/// Fraction of rows with exactly `t` trailing ones, `t = 1, ..., T - 1`.
///
/// Every row must be `T - t` zeros followed by `t` ones with `1 <= t < T`.
pub fn empirical_proportions(x: &[Sequence]) -> Result<Vec<f64>> {
    let periods = x
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Validation("allocation matrix is empty".into()))?;
    let mut counts = vec![0usize; periods.saturating_sub(1)];
    for (i, row) in x.iter().enumerate() {
        if row.len() != periods {
            return Err(Error::Validation(format!("row {i} has {} entries, expected {periods}", row.len())));
        }
        let ones = row.iter().filter(|&&v| v == 1).count();
        let valid = row.iter().all(|&v| v <= 1)
            && (1..periods).contains(&ones)
            && row.iter().enumerate().all(|(j, &v)| (v == 1) == (j >= periods - ones));
        if !valid {
            return Err(Error::Validation(format!(
                "row {i} is not a block of zeros followed by a block of ones starting on 0 and ending on 1"
            )));
        }
        counts[ones - 1] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / x.len() as f64).collect())
}

/// Residual variance `1 / (p (1 - p))` of a binary outcome on the linear
/// predictor scale, for a plug-in normal approximation.
pub fn binary_residual_variance(p_bar: f64) -> Result<f64> {
    if !(p_bar > 0.0 && p_bar < 1.0) {
        return Err(Error::Domain(format!("p_bar must lie in (0, 1), got {p_bar}")));
    }
    Ok(1.0 / (p_bar * (1.0 - p_bar)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cluster_mean_correlation_values() {
        assert_eq!(cluster_mean_correlation(10, 6, 0.0).unwrap(), 0.0);
        assert_eq!(cluster_mean_correlation(10, 6, 1.0).unwrap(), 1.0);
        assert_relative_eq!(cluster_mean_correlation(8, 6, 0.05).unwrap(), 2.4 / 3.35, epsilon = 1e-15);
        let rho = rho_from_e(10, 6, 0.45).unwrap();
        assert_relative_eq!(rho, 0.45 / (60.0 - 59.0 * 0.45), epsilon = 1e-15);
        assert_relative_eq!(cluster_mean_correlation(10, 6, rho).unwrap(), 0.45, epsilon = 1e-12);
        assert!(cluster_mean_correlation(10, 6, 1.5).is_err());
    }

    #[test]
    fn sequence_counts() {
        let r = |e: f64| (optimal_sequence_count(e).unwrap() * 100.0).round() / 100.0;
        assert_eq!(r(0.45), 3.04);
        assert_eq!(r(0.10), 1.46);
        assert_eq!(r(0.15), 1.63);
        assert_eq!(r(0.30), 2.21);
        assert_eq!(r(0.75), 7.46);
        assert_eq!(optimal_sequence_count(0.0).unwrap(), 1.0);
        assert!(optimal_sequence_count(1.0).is_err());
    }

    #[test]
    fn cohort_proportions_sum_to_one() {
        let l = cohort_optimal_proportions(10, 6, 0.05, 0.001, 0.25).unwrap();
        assert_relative_eq!(l.p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(l.p[0], l.p[4]);
        assert!(cohort_optimal_proportions(10, 6, 1.2, 0.0, 0.0).is_err());
    }

    #[test]
    fn empirical() {
        let x = vec![
            vec![0, 0, 0, 0, 0, 1],
            vec![0, 0, 0, 0, 0, 1],
            vec![0, 0, 0, 0, 1, 1],
            vec![0, 1, 1, 1, 1, 1],
        ];
        assert_eq!(empirical_proportions(&x).unwrap(), vec![0.5, 0.25, 0.0, 0.0, 0.25]);
        assert!(empirical_proportions(&[vec![0, 1, 0, 1]]).is_err());
        assert!(empirical_proportions(&[vec![1, 1, 1, 1]]).is_err());
        assert!(empirical_proportions(&[vec![0, 0, 0, 0]]).is_err());
    }

    #[test]
    fn binary_variance() {
        assert_eq!(binary_residual_variance(0.5).unwrap(), 4.0);
        assert_relative_eq!(binary_residual_variance(0.2).unwrap(), 6.25, epsilon = 1e-12);
        assert_relative_eq!(binary_residual_variance(0.3).unwrap(), binary_residual_variance(0.7).unwrap(), epsilon = 1e-12);
        assert!(binary_residual_variance(0.0).is_err());
        assert!(binary_residual_variance(1.0).is_err());
    }
}
