//! Critical values, power, and the multivariate normal orthant integral.
//!
//! Hypotheses are one-sided, `H0f: beta_f <= 0`, rejected when the Wald
//! statistic `Z_f = beta_hat_f * sqrt(I_f)` exceeds the critical value `e`.

use std::f64::consts::SQRT_2;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::model::CovarianceSummary;
use crate::scalar::Scalar;

/// Seed used for the quasi-Monte Carlo integral when the caller does not supply one.
pub const DEFAULT_QMC_SEED: u64 = 0x5eed_2018;

/// Target absolute error (three standard errors) of the orthant integral.
pub const DEFAULT_QMC_TOLERANCE: f64 = 2e-6;

/// Largest dimension accepted by [`mvn_upper_orthant`].
pub const MAX_MVN_DIM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    /// Per-hypothesis error rate `alpha`.
    #[default]
    None,
    /// Familywise error rate `alpha` via `alpha / q`.
    Bonferroni,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PowerType {
    /// Reject every false null.
    #[default]
    Individual,
    /// Reject at least one null.
    Combined,
}

/// Error-rate and power requirements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSpec {
    pub alpha: f64,
    #[serde(default)]
    pub correction: Correction,
    /// Type II error rate; `1.0` ignores power.
    pub beta: f64,
    /// Clinically relevant differences, one per treatment effect.
    pub delta: Vec<f64>,
    #[serde(default)]
    pub power_type: PowerType,
}

impl PowerSpec {
    /// Spec that ignores power (`beta = 1`) with unit differences.
    pub fn ignore_power(q: usize) -> Self {
        PowerSpec {
            alpha: 0.05,
            correction: Correction::None,
            beta: 1.0,
            delta: vec![1.0; q],
            power_type: PowerType::Individual,
        }
    }

    pub fn q(&self) -> usize {
        self.delta.len()
    }

    /// Required power `1 - beta`.
    pub fn target(&self) -> f64 {
        1.0 - self.beta
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Validation(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Validation(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if self.delta.len() != q {
            return Err(Error::Validation(format!(
                "delta has {} entries but the design has q = {q} treatment effects",
                self.delta.len()
            )));
        }
        if self.delta.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Validation("delta entries must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Rejection probabilities of a design at `delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub critical_value: f64,
    pub per_hypothesis: Vec<f64>,
    pub combined: f64,
    pub meets_requirement: bool,
}

/// Standard normal distribution function.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal quantile function.
#[inline]
pub fn normal_quantile(p: f64) -> f64 {
    let mut x = -SQRT_2 * erfc_inv(2.0 * p);
    // Newton polish against the more accurate erfc.
    for _ in 0..2 {
        let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if !x.is_finite() || density <= 0.0 {
            break;
        }
        x -= (normal_cdf(x) - p) / density;
    }
    x
}

/// Upper-tail critical value `e` with `P(Z > e) = alpha` (or `alpha / q` under Bonferroni).
pub fn critical_value(alpha: f64, q: usize, correction: Correction) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if q == 0 {
        return Err(Error::Domain("q must be at least 1".into()));
    }
    let tail = match correction {
        Correction::None => alpha,
        Correction::Bonferroni => alpha / q as f64,
    };
    if tail < f64::MIN_POSITIVE {
        return Err(Error::Domain(format!("tail probability {tail:e} underflows")));
    }
    Ok(-normal_quantile(tail))
}

/// `P(Z_f > e)` when `beta_f = delta_f`: `Phi(delta_f sqrt(I_f) - e)`.
#[inline]
pub fn per_hypothesis_power(delta_f: f64, info_f: f64, e: f64) -> f64 {
    normal_cdf(delta_f * info_f.sqrt() - e)
}

/// Estimate of a multivariate normal probability with its error bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthantEstimate {
    pub value: f64,
    /// Three standard errors across the randomized lattice replicates.
    pub error: f64,
}

/// `P(Y_1 <= limits_1, ..., Y_q <= limits_q)` for `Y ~ N(mean, corr)`.
///
/// The name follows its use for combined power, where one minus this value is
/// the probability that at least one statistic lands in its upper rejection
/// region. Computed by separation of variables with a randomized rank-1
/// lattice rule; deterministic for a given `seed`.
pub fn mvn_upper_orthant(
    limits: &[f64],
    mean: &[f64],
    corr: &DMatrix<f64>,
    seed: u64,
) -> Result<f64> {
    Ok(mvn_orthant_estimate(limits, mean, corr, seed, DEFAULT_QMC_TOLERANCE)?.value)
}

const LATTICE_SHIFTS: usize = 12;
const MIN_LATTICE_POINTS: usize = 1 << 10;
const MAX_LATTICE_POINTS: usize = 1 << 18;
const PRIMES: [f64; 10] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0];

/// [`mvn_upper_orthant`] with an explicit error target and the error estimate.
pub fn mvn_orthant_estimate(
    limits: &[f64],
    mean: &[f64],
    corr: &DMatrix<f64>,
    seed: u64,
    tolerance: f64,
) -> Result<OrthantEstimate> {
    let q = limits.len();
    if q == 0 || q > MAX_MVN_DIM {
        return Err(Error::Validation(format!("dimension must be in 1..={MAX_MVN_DIM}, got {q}")));
    }
    if mean.len() != q || corr.shape() != (q, q) {
        return Err(Error::Validation("limits, mean and corr dimensions disagree".into()));
    }
    validate_correlation(corr)?;

    let upper: Vec<f64> = limits.iter().zip(mean).map(|(b, mu)| b - mu).collect();
    if upper.iter().any(|b| b.is_nan()) {
        return Err(Error::Validation("limits and mean must not be NaN".into()));
    }
    let chol = semidefinite_cholesky(corr);
    let first = conditional_cdf(upper[0], 0.0, chol[(0, 0)]);
    if q == 1 || first == 0.0 {
        return Ok(OrthantEstimate { value: first, error: 0.0 });
    }

    let generator: Vec<f64> = PRIMES[..q - 1].iter().map(|p| p.sqrt().fract()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<Vec<f64>> = (0..LATTICE_SHIFTS)
        .map(|_| (0..q - 1).map(|_| rng.random::<f64>()).collect())
        .collect();

    let mut n = MIN_LATTICE_POINTS;
    let mut y = vec![0.0; q];
    loop {
        let mut means = [0.0; LATTICE_SHIFTS];
        for (s, shift) in shifts.iter().enumerate() {
            let mut acc = 0.0;
            for k in 1..=n {
                let mut f = first;
                let mut prev = first;
                for i in 1..q {
                    let x = (k as f64 * generator[i - 1] + shift[i - 1]).fract();
                    let w = (2.0 * x - 1.0).abs();
                    let u = (w * prev).clamp(1e-300, 1.0 - 1e-16);
                    y[i - 1] = normal_quantile(u);
                    let shift_sum: f64 = (0..i).map(|j| chol[(i, j)] * y[j]).sum();
                    prev = conditional_cdf(upper[i], shift_sum, chol[(i, i)]);
                    f *= prev;
                    if f == 0.0 {
                        break;
                    }
                }
                acc += f;
            }
            means[s] = acc / n as f64;
        }
        let value = means.iter().sum::<f64>() / LATTICE_SHIFTS as f64;
        let var = means.iter().map(|m| (m - value).powi(2)).sum::<f64>()
            / ((LATTICE_SHIFTS - 1) * LATTICE_SHIFTS) as f64;
        let error = 3.0 * var.sqrt();
        if error <= tolerance || n >= MAX_LATTICE_POINTS {
            return Ok(OrthantEstimate {
                value: value.clamp(0.0, 1.0),
                error,
            });
        }
        n *= 2;
    }
}

#[inline]
fn conditional_cdf(upper: f64, shift: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        normal_cdf((upper - shift) / scale)
    } else if upper - shift >= 0.0 {
        1.0
    } else {
        0.0
    }
}

fn validate_correlation(corr: &DMatrix<f64>) -> Result<()> {
    let q = corr.nrows();
    for i in 0..q {
        if (corr[(i, i)] - 1.0).abs() > 1e-8 {
            return Err(Error::Validation(format!(
                "correlation diagonal entry {i} is {}, not 1",
                corr[(i, i)]
            )));
        }
        for j in 0..i {
            if (corr[(i, j)] - corr[(j, i)]).abs() > 1e-8 || !corr[(i, j)].is_finite() {
                return Err(Error::Validation("correlation matrix is not symmetric".into()));
            }
        }
    }
    let min_eig = corr.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -1e-8 {
        return Err(Error::Validation(format!(
            "correlation matrix is not positive semidefinite (eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

/// Lower-triangular factor of a positive semidefinite matrix; dependent
/// directions get a zero pivot.
fn semidefinite_cholesky(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d <= 1e-12 {
            continue;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in j + 1..n {
            let s = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / pivot;
        }
    }
    l
}

/// Correlation matrix of the Wald statistics, `diag(I^1/2) Lambda diag(I^1/2)`,
/// renormalized to an exact unit diagonal.
pub fn statistic_correlation(lambda: &DMatrix<f64>) -> DMatrix<f64> {
    let q = lambda.nrows();
    DMatrix::from_fn(q, q, |i, j| {
        if i == j {
            1.0
        } else {
            lambda[(i, j)] / (lambda[(i, i)] * lambda[(j, j)]).sqrt()
        }
    })
}

/// Probability of rejecting at least one null at `delta`.
pub fn combined_power(lambda: &DMatrix<f64>, delta: &[f64], e: f64, seed: u64) -> Result<f64> {
    let q = lambda.nrows();
    let mean: Vec<f64> = (0..q).map(|f| delta[f] / lambda[(f, f)].sqrt()).collect();
    if q == 1 {
        return Ok(normal_cdf(mean[0] - e));
    }
    let limits = vec![e; q];
    let none = mvn_upper_orthant(&limits, &mean, &statistic_correlation(lambda), seed)?;
    Ok((1.0 - none).clamp(0.0, 1.0))
}

/// Individual and combined power of a design.
pub fn power_report<T: Scalar>(summary: &CovarianceSummary<T>, spec: &PowerSpec) -> Result<PowerReport> {
    let q = summary.q();
    spec.validate(q)?;
    let lambda = summary.lambda.map(Scalar::as_f64);
    let e = critical_value(spec.alpha, q, spec.correction)?;
    let per_hypothesis: Vec<f64> = (0..q)
        .map(|f| per_hypothesis_power(spec.delta[f], 1.0 / lambda[(f, f)], e))
        .collect();
    let combined = combined_power(&lambda, &spec.delta, e, DEFAULT_QMC_SEED)?;
    let meets_requirement = match spec.power_type {
        PowerType::Individual => {
            per_hypothesis.iter().copied().fold(f64::INFINITY, f64::min) >= spec.target()
        }
        PowerType::Combined => combined >= spec.target(),
    };
    Ok(PowerReport {
        critical_value: e,
        per_hypothesis,
        combined,
        meets_requirement,
    })
}

/// Power feasibility of a covariance matrix without building a full report.
/// Combined power is only integrated when the single-hypothesis and union
/// bounds cannot decide.
pub(crate) fn meets_power(lambda: &DMatrix<f64>, spec: &PowerSpec, e: f64) -> bool {
    let target = spec.target();
    if target <= 0.0 {
        return true;
    }
    let q = lambda.nrows();
    let powers = (0..q).map(|f| per_hypothesis_power(spec.delta[f], 1.0 / lambda[(f, f)], e));
    match spec.power_type {
        PowerType::Individual => powers.fold(f64::INFINITY, f64::min) >= target,
        PowerType::Combined => {
            let (max, sum) = powers.fold((0.0f64, 0.0), |(m, s), p| (m.max(p), s + p));
            if max >= target {
                true
            } else if sum < target {
                false
            } else {
                combined_power(lambda, &spec.delta, e, DEFAULT_QMC_SEED)
                    .map(|c| c >= target)
                    .unwrap_or(false)
            }
        }
    }
}
