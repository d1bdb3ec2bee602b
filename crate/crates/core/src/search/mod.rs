//! Optimality criteria, the admissible objective, and design searches.

mod ce;
mod exhaustive;
mod kernel;
mod sensitivity;

use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::PowerReport;
use crate::model::{CovarianceSummary, Design, Sequence};
use crate::scalar::Scalar;

pub use ce::{cross_entropy_search, CEParams};
pub use exhaustive::{exhaustive_search, exhaustive_search_with, PreparedSpace, SearchOptions};
pub use sensitivity::{
    sensitivity_map, variance_ratio_map, GridSpec, RatioPoint, SensitivityMap, SensitivityPoint,
};

/// Relative tolerance under which two criterion values are treated as tied.
pub const CRITERION_TIE_TOLERANCE: f64 = 1e-10;

/// Absolute tolerance under which two rescaled objective values are tied.
pub const OBJECTIVE_TIE_TOLERANCE: f64 = 1e-10;

/// Default bound on the number of `(m, X)` candidates of an exhaustive search.
pub const DEFAULT_CANDIDATE_CAP: u128 = 100_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    /// `det(Lambda)`.
    #[serde(alias = "d", alias = "D-optimal", alias = "d_optimal")]
    D,
    /// `tr(Lambda) / q`.
    #[serde(alias = "a", alias = "A-optimal", alias = "a_optimal")]
    A,
    /// Largest diagonal entry of `Lambda`.
    #[serde(alias = "e", alias = "E-optimal", alias = "e_optimal")]
    E,
}

impl Criterion {
    pub fn label(self) -> &'static str {
        match self {
            Criterion::D => "det",
            Criterion::A => "trace_over_q",
            Criterion::E => "max_diag",
        }
    }

    /// Value from a covariance matrix that is already known to be positive definite.
    pub fn of<T: Scalar>(self, lambda: &DMatrix<T>) -> T {
        let q = lambda.nrows();
        match self {
            Criterion::D => lambda.determinant(),
            Criterion::A => lambda.trace() / T::lit(q as f64),
            Criterion::E => (0..q).fold(T::zero(), |acc, i| acc.max(lambda[(i, i)])),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Criterion::D => "D",
            Criterion::A => "A",
            Criterion::E => "E",
        };
        f.write_str(s)
    }
}

/// Criterion value of a covariance summary.
///
/// Errors with [`Error::Validation`] unless `Lambda` is symmetric positive definite.
pub fn criterion_value<T: Scalar>(summary: &CovarianceSummary<T>, criterion: Criterion) -> Result<T> {
    let lambda = &summary.lambda;
    let q = lambda.nrows();
    if q == 0 || lambda.ncols() != q {
        return Err(Error::Validation("covariance matrix must be square and non-empty".into()));
    }
    let scale = lambda.iter().fold(T::zero(), |a, &x| a.max(x.abs()));
    let tol = scale * T::lit(1e-10).max(T::eps() * T::lit(16.0));
    for i in 0..q {
        for j in 0..i {
            if (lambda[(i, j)] - lambda[(j, i)]).abs() > tol {
                return Err(Error::Validation("covariance matrix is not symmetric".into()));
            }
        }
    }
    let chol = lambda
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Validation("covariance matrix is not positive definite".into()))?;
    Ok(match criterion {
        Criterion::D => {
            let d = chol.l().diagonal().iter().fold(T::one(), |acc, &x| acc * x);
            d * d
        }
        _ => criterion.of(lambda),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostFunction {
    /// `m * C * T`.
    #[default]
    TotalObservations,
}

impl CostFunction {
    pub fn evaluate(self, m: usize, clusters: usize, periods: usize) -> f64 {
        match self {
            CostFunction::TotalObservations => (m * clusters * periods) as f64,
        }
    }

    pub fn of(self, design: &Design) -> f64 {
        self.evaluate(design.m(), design.clusters(), design.periods())
    }
}

/// Total number of observations `m C T`.
pub fn total_observations(design: &Design) -> f64 {
    CostFunction::TotalObservations.of(design)
}

/// Weighted trade-off between cost and criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// Weight on the rescaled cost, in `[0, 1]`.
    pub w: f64,
    pub criterion: Criterion,
    #[serde(default, alias = "cost_fn")]
    pub cost: CostFunction,
    #[serde(default)]
    pub scaling: ScalingDomain,
}

/// Set of designs whose cost and criterion ranges rescale the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingDomain {
    /// Every identifiable design of the space, whether or not it meets power.
    #[default]
    Space,
    /// Only the designs that meet the power requirement.
    Feasible,
}

impl Objective {
    pub fn new(w: f64, criterion: Criterion) -> Self {
        Objective {
            w,
            criterion,
            cost: CostFunction::TotalObservations,
            scaling: ScalingDomain::Space,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::Validation(format!("w must lie in [0, 1], got {}", self.w)));
        }
        Ok(())
    }

    /// Non-fatal remarks about the objective.
    pub fn warnings(&self) -> Vec<String> {
        if self.w == 1.0 {
            vec!["w = 1 ignores the optimality criterion; the cheapest feasible design wins".into()]
        } else {
            Vec::new()
        }
    }

    /// Rescaled objective given the feasible ranges. A zero-width range contributes 0.
    pub fn value(&self, cost: f64, criterion: f64, scaling: &Scaling) -> f64 {
        let unit = |x: f64, lo: f64, hi: f64| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
        self.w * unit(cost, scaling.cost_min, scaling.cost_max)
            + (1.0 - self.w) * unit(criterion, scaling.criterion_min, scaling.criterion_max)
    }
}

/// Ranges of cost and criterion used to rescale the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub cost_min: f64,
    pub cost_max: f64,
    pub criterion_min: f64,
    pub criterion_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Design,
    pub criterion: Criterion,
    pub criterion_value: f64,
    pub cost: f64,
    pub objective_value: f64,
    pub power: PowerReport,
    /// `Lambda_q` of the winning design.
    pub covariance: Vec<Vec<f64>>,
    /// Feasible ranges used for rescaling; exhaustive searches only.
    pub scaling: Option<Scaling>,
    pub n_evaluated: u64,
    pub n_feasible: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SearchOutcome {
    Admissible(SearchResult),
    /// No design meets the power requirement. The suggestion is the criterion
    /// optimum with power ignored.
    NoAdmissibleDesign { suggestion: SearchResult },
}

impl SearchOutcome {
    pub fn admissible(self) -> Option<SearchResult> {
        match self {
            SearchOutcome::Admissible(r) => Some(r),
            SearchOutcome::NoAdmissibleDesign { .. } => None,
        }
    }

    pub fn result(&self) -> &SearchResult {
        match self {
            SearchOutcome::Admissible(r) => r,
            SearchOutcome::NoAdmissibleDesign { suggestion } => suggestion,
        }
    }

    pub fn is_admissible(&self) -> bool {
        matches!(self, SearchOutcome::Admissible(_))
    }
}

/// Progress report passed to search callbacks.
#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    pub evaluated: u64,
    pub total: u64,
    /// Best criterion value among power-feasible designs so far.
    pub best_criterion: Option<f64>,
}

/// Tie-break order between equally good designs: lower cost, then the
/// lexicographically smaller canonical allocation, then smaller `m`.
pub(crate) fn tie_break(a: (f64, &[Sequence], usize), b: (f64, &[Sequence], usize)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)).then_with(|| a.2.cmp(&b.2))
}

/// Finishes a result for `design` from the reference covariance path.
pub(crate) fn describe(
    design: Design,
    vc: &crate::model::VarianceComponents<f64>,
    spec: &crate::inference::PowerSpec,
    objective: &Objective,
) -> Result<SearchResult> {
    let summary = crate::model::treatment_covariance(&design, vc)?;
    let power = crate::inference::power_report(&summary, spec)?;
    let criterion_value = criterion_value(&summary, objective.criterion)?;
    let q = summary.q();
    let covariance = (0..q)
        .map(|i| (0..q).map(|j| summary.lambda[(i, j)]).collect())
        .collect();
    Ok(SearchResult {
        cost: objective.cost.of(&design),
        best: design,
        criterion: objective.criterion,
        criterion_value,
        objective_value: criterion_value,
        power,
        covariance,
        scaling: None,
        n_evaluated: 0,
        n_feasible: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn criteria_on_diagonal() {
        let s = CovarianceSummary::from_lambda(DMatrix::<f64>::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1]));
        assert!((criterion_value(&s, Criterion::D).unwrap() - 0.0175).abs() < 1e-15);
        assert!((criterion_value(&s, Criterion::A).unwrap() - 0.15).abs() < 1e-15);
        assert!((criterion_value(&s, Criterion::E).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn criteria_coincide_for_one_effect() {
        let s = CovarianceSummary::from_lambda(DMatrix::<f64>::from_element(1, 1, 0.037));
        for c in [Criterion::D, Criterion::A, Criterion::E] {
            assert!((criterion_value(&s, c).unwrap() - 0.037).abs() < 1e-16);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let s = CovarianceSummary::from_lambda(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(criterion_value(&s, Criterion::A).is_err());
        let s = CovarianceSummary::from_lambda(DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]));
        assert!(criterion_value(&s, Criterion::E).is_err());
    }

    #[test]
    fn costs() {
        let d = Design::new(2, 2, vec![vec![0, 1], vec![0, 1]]).unwrap();
        assert_eq!(total_observations(&d), 8.0);
    }

    #[test]
    fn rescaling_with_flat_range() {
        let o = Objective::new(0.5, Criterion::E);
        let s = Scaling {
            cost_min: 100.0,
            cost_max: 100.0,
            criterion_min: 1.0,
            criterion_max: 3.0,
        };
        assert_eq!(o.value(100.0, 2.0, &s), 0.25);
        assert!(Objective::new(1.5, Criterion::E).validate().is_err());
        assert_eq!(Objective::new(1.0, Criterion::E).warnings().len(), 1);
    }

    #[test]
    fn criterion_json_names() {
        let c: Criterion = serde_json::from_str("\"E\"").unwrap();
        assert_eq!(c, Criterion::E);
        let c: Criterion = serde_json::from_str("\"d\"").unwrap();
        assert_eq!(c, Criterion::D);
    }
}
