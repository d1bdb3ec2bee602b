//! Linear mixed model for stepped-wedge designs.
//!
//! Observations `y_ijk` (cluster `i`, period `j`, individual `k`) follow
//!
//! ```text
//! y_ijk = mu + pi_j + sum_d beta_d 1{X_ij >= d} + c_i + theta_ij + s_ik + eps_ijk
//! ```
//!
//! with `pi_1 = 0`. The fixed-effect columns are laid out as
//! `[beta_1 .. beta_{D-1}, mu, pi_2 .. pi_T]` so the treatment effects form the
//! leading block of the covariance matrix.
//!
//! Every cluster shares the same marginal covariance block `V`, and the fixed
//! effects only vary by period, so the information contributed by a cluster is
//! `B' W B` where `B` is the `T x p` period-level design of its sequence and
//! `W = U' V^{-1} U` collapses the `m` individuals of each period
//! (`U = I_T (x) 1_m`). [`InformationEngine`] factorizes `V` once and memoizes
//! `B' W B` per sequence.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Intervention label of one cluster-period cell.
pub type Label = u8;

/// Allocation sequence of one cluster across the periods.
pub type Sequence = Vec<Label>;

/// Relative eigenvalue threshold below which the information matrix is
/// considered rank deficient (for `f64`).
pub const RANK_TOLERANCE: f64 = 1e-8;

/// A trial design `{m, C, T, X}` together with the number of arms `D`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "DesignRepr", into = "DesignRepr")]
pub struct Design {
    m: usize,
    clusters: usize,
    periods: usize,
    arms: usize,
    allocation: Vec<Sequence>,
}

#[derive(Serialize, Deserialize)]
struct DesignRepr {
    m: usize,
    #[serde(rename = "C")]
    clusters: usize,
    #[serde(rename = "T")]
    periods: usize,
    #[serde(rename = "D")]
    arms: usize,
    #[serde(rename = "X")]
    allocation: Vec<Sequence>,
}

impl TryFrom<DesignRepr> for Design {
    type Error = Error;

    fn try_from(r: DesignRepr) -> Result<Self> {
        Design::with_dims(r.m, r.clusters, r.periods, r.arms, r.allocation)
    }
}

impl From<Design> for DesignRepr {
    fn from(d: Design) -> Self {
        DesignRepr {
            m: d.m,
            clusters: d.clusters,
            periods: d.periods,
            arms: d.arms,
            allocation: d.allocation,
        }
    }
}

impl Design {
    /// Builds a design, deriving `C` and `T` from the allocation matrix.
    pub fn new(m: usize, arms: usize, allocation: Vec<Sequence>) -> Result<Self> {
        let clusters = allocation.len();
        let periods = allocation.first().map_or(0, Vec::len);
        Self::with_dims(m, clusters, periods, arms, allocation)
    }

    /// Builds a design and checks the allocation matrix against the declared dimensions.
    pub fn with_dims(
        m: usize,
        clusters: usize,
        periods: usize,
        arms: usize,
        allocation: Vec<Sequence>,
    ) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidDesign(format!("m must be at least 2, got {m}")));
        }
        if clusters < 2 {
            return Err(Error::InvalidDesign(format!("C must be at least 2, got {clusters}")));
        }
        if periods < 2 {
            return Err(Error::InvalidDesign(format!("T must be at least 2, got {periods}")));
        }
        if !(2..=256).contains(&arms) {
            return Err(Error::InvalidDesign(format!("D must be in 2..=256, got {arms}")));
        }
        if allocation.len() != clusters {
            return Err(Error::InvalidDesign(format!(
                "X has {} rows but C = {clusters}",
                allocation.len()
            )));
        }
        for (i, row) in allocation.iter().enumerate() {
            if row.len() != periods {
                return Err(Error::InvalidDesign(format!(
                    "row {} of X has {} entries but T = {periods}",
                    i + 1,
                    row.len()
                )));
            }
            if let Some(&bad) = row.iter().find(|&&x| usize::from(x) >= arms) {
                return Err(Error::InvalidDesign(format!(
                    "row {} of X contains label {bad}, outside 0..{arms}",
                    i + 1
                )));
            }
        }
        Ok(Design {
            m,
            clusters,
            periods,
            arms,
            allocation,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    /// Number of treatment effects of interest, `q = D - 1`.
    pub fn q(&self) -> usize {
        self.arms - 1
    }

    pub fn allocation(&self) -> &[Sequence] {
        &self.allocation
    }

    /// Same design with rows of `X` sorted lexicographically.
    pub fn canonical(&self) -> Design {
        let mut d = self.clone();
        d.allocation.sort();
        d
    }

    /// Same allocation with a different number of measurements per cluster-period.
    pub fn with_m(&self, m: usize) -> Result<Design> {
        Design::with_dims(m, self.clusters, self.periods, self.arms, self.allocation.clone())
    }
}

/// Variance components of the cohort model (outcome variance units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents<T = f64> {
    /// Cluster random effect `c_i`.
    pub sigma2_c: T,
    /// Cluster-by-period interaction `theta_ij`.
    pub sigma2_theta: T,
    /// Repeated-measures individual effect `s_ik` (zero for cross-sectional designs).
    pub sigma2_s: T,
    /// Residual error.
    pub sigma2_eps: T,
}

impl<T: Scalar> VarianceComponents<T> {
    pub fn new(sigma2_c: T, sigma2_theta: T, sigma2_s: T, sigma2_eps: T) -> Result<Self> {
        let vc = VarianceComponents {
            sigma2_c,
            sigma2_theta,
            sigma2_s,
            sigma2_eps,
        };
        vc.validate()?;
        Ok(vc)
    }

    /// Cross-sectional shorthand: `sigma2_c = rho sigma2`, `sigma2_eps = (1 - rho) sigma2`.
    pub fn cross_sectional(sigma2: T, rho: T) -> Result<Self> {
        if !(rho >= T::zero() && rho <= T::one()) {
            return Err(Error::InvalidVariance(format!(
                "rho must lie in [0, 1], got {}",
                rho.as_f64()
            )));
        }
        Self::new(rho * sigma2, T::zero(), T::zero(), (T::one() - rho) * sigma2)
    }

    /// Builds components from the total variance and the three correlations
    /// (within-period `rho0`, inter-period `rho1`, individual auto-correlation `rho2`).
    pub fn from_correlations(sigma2: T, rho0: T, rho1: T, rho2: T) -> Result<Self> {
        Self::new(
            rho1 * sigma2,
            (rho0 - rho1) * sigma2,
            (rho2 - rho1) * sigma2,
            (T::one() - rho0 - rho2 + rho1) * sigma2,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [
            ("sigma2_c", self.sigma2_c),
            ("sigma2_theta", self.sigma2_theta),
            ("sigma2_s", self.sigma2_s),
            ("sigma2_eps", self.sigma2_eps),
        ];
        for (name, v) in parts {
            if !v.is_finite() || v < T::zero() {
                return Err(Error::InvalidVariance(format!(
                    "{name} must be finite and non-negative, got {}",
                    v.as_f64()
                )));
            }
        }
        if self.total() <= T::zero() {
            return Err(Error::InvalidVariance("total variance must be positive".into()));
        }
        Ok(())
    }

    /// `sigma^2 = sigma2_c + sigma2_theta + sigma2_s + sigma2_eps`.
    pub fn total(&self) -> T {
        self.sigma2_c + self.sigma2_theta + self.sigma2_s + self.sigma2_eps
    }

    /// Within-period correlation.
    pub fn rho0(&self) -> T {
        (self.sigma2_c + self.sigma2_theta) / self.total()
    }

    /// Inter-period correlation.
    pub fn rho1(&self) -> T {
        self.sigma2_c / self.total()
    }

    /// Individual auto-correlation.
    pub fn rho2(&self) -> T {
        (self.sigma2_c + self.sigma2_s) / self.total()
    }

    pub fn is_cross_sectional(&self) -> bool {
        self.sigma2_s == T::zero()
    }
}

/// Explicit model matrices for a design: one fixed-effect block per cluster and
/// the (shared) marginal covariance block.
#[derive(Clone, Debug)]
pub struct ModelMatrices<T: Scalar = f64> {
    /// `A_i`, each `(mT) x p`, rows ordered period-major `(j, k)`.
    pub fixed_effects: Vec<DMatrix<T>>,
    /// Cluster block of `Z G Z' + R`, `(mT) x (mT)`.
    pub marginal: DMatrix<T>,
    /// Number of fixed effects `p = (D - 1) + 1 + (T - 1)`.
    pub n_fixed: usize,
}

/// Covariance of the treatment-effect estimators.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceSummary<T: Scalar = f64> {
    /// `Lambda_q`, `q x q`.
    pub lambda: DMatrix<T>,
    /// Information levels `I_f = 1 / Lambda_q[f, f]`.
    pub info: DVector<T>,
}

impl<T: Scalar> CovarianceSummary<T> {
    pub fn from_lambda(lambda: DMatrix<T>) -> Self {
        let info = DVector::from_iterator(
            lambda.nrows(),
            (0..lambda.nrows()).map(|f| T::one() / lambda[(f, f)]),
        );
        CovarianceSummary { lambda, info }
    }

    pub fn q(&self) -> usize {
        self.lambda.nrows()
    }
}

/// Number of fixed effects for `arms` arms over `periods` periods.
pub fn n_fixed_effects(arms: usize, periods: usize) -> usize {
    (arms - 1) + periods
}

/// Names of the fixed-effect columns in layout order.
pub fn fixed_effect_names(arms: usize, periods: usize) -> Vec<String> {
    (1..arms)
        .map(|d| format!("beta{d}"))
        .chain(std::iter::once("mu".to_string()))
        .chain((2..=periods).map(|j| format!("pi{j}")))
        .collect()
}

/// Period-level fixed-effect design of one sequence: a `T x p` matrix whose row
/// `j` holds `[1{x_j >= 1} .. 1{x_j >= D-1}, 1, 1{j = 2} .. 1{j = T}]`.
pub fn sequence_design<T: Scalar>(sequence: &[Label], arms: usize) -> DMatrix<T> {
    let periods = sequence.len();
    let p = n_fixed_effects(arms, periods);
    let q = arms - 1;
    let mut b = DMatrix::zeros(periods, p);
    for (j, &x) in sequence.iter().enumerate() {
        for d in 1..arms {
            if usize::from(x) >= d {
                b[(j, d - 1)] = T::one();
            }
        }
        b[(j, q)] = T::one();
        if j > 0 {
            b[(j, q + j)] = T::one();
        }
    }
    b
}

/// Marginal covariance block of one cluster, observations indexed `(j, k)` period-major:
/// `V[(j,k),(j',k')] = sigma2_c + 1{j=j'} sigma2_theta + 1{k=k'} sigma2_s + 1{j=j',k=k'} sigma2_eps`.
pub fn marginal_covariance<T: Scalar>(
    m: usize,
    periods: usize,
    vc: &VarianceComponents<T>,
) -> DMatrix<T> {
    let n = m * periods;
    DMatrix::from_fn(n, n, |r, c| {
        let (j, k) = (r / m, r % m);
        let (j2, k2) = (c / m, c % m);
        let mut v = vc.sigma2_c;
        if j == j2 {
            v += vc.sigma2_theta;
        }
        if k == k2 {
            v += vc.sigma2_s;
        }
        if j == j2 && k == k2 {
            v += vc.sigma2_eps;
        }
        v
    })
}

/// Builds the explicit per-cluster fixed-effect matrices and the marginal covariance block.
pub fn build_model_matrices<T: Scalar>(
    design: &Design,
    vc: &VarianceComponents<T>,
) -> Result<ModelMatrices<T>> {
    vc.validate()?;
    let m = design.m();
    let ones = DMatrix::from_element(m, 1, T::one());
    let fixed_effects = design
        .allocation()
        .iter()
        .map(|seq| sequence_design::<T>(seq, design.arms()).kronecker(&ones))
        .collect();
    Ok(ModelMatrices {
        fixed_effects,
        marginal: marginal_covariance(m, design.periods(), vc),
        n_fixed: n_fixed_effects(design.arms(), design.periods()),
    })
}

/// Factorized marginal covariance for a fixed `(m, T, vc)` with memoized
/// per-sequence information contributions.
///
/// The cache is behind a lock, so one engine can be shared across threads.
#[derive(Debug)]
pub struct InformationEngine<T: Scalar = f64> {
    m: usize,
    periods: usize,
    arms: usize,
    period_weights: DMatrix<T>,
    cache: RwLock<HashMap<Sequence, Arc<DMatrix<T>>>>,
}

impl<T: Scalar> InformationEngine<T> {
    pub fn new(m: usize, periods: usize, arms: usize, vc: &VarianceComponents<T>) -> Result<Self> {
        vc.validate()?;
        if m == 0 || periods == 0 || arms < 2 {
            return Err(Error::InvalidDesign(format!(
                "invalid dimensions m={m}, T={periods}, D={arms}"
            )));
        }
        if vc.sigma2_eps <= T::zero() {
            return Err(Error::DegenerateVariance(
                "sigma2_eps must be positive for V to be positive definite".into(),
            ));
        }
        let v = marginal_covariance(m, periods, vc);
        let chol = v.cholesky().ok_or_else(|| {
            Error::DegenerateVariance("marginal covariance is not positive definite".into())
        })?;
        let ones = DMatrix::from_element(m, 1, T::one());
        let collapse = DMatrix::<T>::identity(periods, periods).kronecker(&ones);
        let solved = chol.solve(&collapse);
        let w = collapse.transpose() * solved;
        let period_weights = (&w + w.transpose()) * T::lit(0.5);
        Ok(InformationEngine {
            m,
            periods,
            arms,
            period_weights,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn n_fixed(&self) -> usize {
        n_fixed_effects(self.arms, self.periods)
    }

    /// `W = U' V^{-1} U`, the `T x T` weight matrix of cluster-period totals.
    pub fn period_weights(&self) -> &DMatrix<T> {
        &self.period_weights
    }

    /// `B' W B` for one sequence, computed without touching the cache.
    pub fn sequence_information(&self, sequence: &[Label]) -> DMatrix<T> {
        debug_assert_eq!(sequence.len(), self.periods);
        let b = sequence_design::<T>(sequence, self.arms);
        let k = b.transpose() * &self.period_weights * &b;
        (&k + k.transpose()) * T::lit(0.5)
    }

    /// Memoized [`Self::sequence_information`].
    pub fn contribution(&self, sequence: &[Label]) -> Arc<DMatrix<T>> {
        if let Some(hit) = self.cache.read().expect("cache lock").get(sequence) {
            return Arc::clone(hit);
        }
        let k = Arc::new(self.sequence_information(sequence));
        self.cache
            .write()
            .expect("cache lock")
            .entry(sequence.to_vec())
            .or_insert(k)
            .clone()
    }

    /// Total information `sum_i A_i' V^{-1} A_i` of an allocation matrix.
    pub fn information(&self, allocation: &[Sequence]) -> DMatrix<T> {
        let p = self.n_fixed();
        let mut info = DMatrix::zeros(p, p);
        for seq in allocation {
            info += &*self.contribution(seq);
        }
        info
    }
}

/// Information matrix of an allocation with unit weights (`V = I`, `m = 1`);
/// it has the same rank as the GLS information under any positive definite `V`.
pub fn unit_information<T: Scalar>(allocation: &[Sequence], arms: usize) -> DMatrix<T> {
    let periods = allocation.first().map_or(0, Vec::len);
    let p = n_fixed_effects(arms, periods);
    let mut info = DMatrix::zeros(p, p);
    for seq in allocation {
        let b = sequence_design::<T>(seq, arms);
        info += b.transpose() * b;
    }
    info
}

fn rank_threshold<T: Scalar>() -> T {
    let floor = T::lit(RANK_TOLERANCE);
    let noise = T::eps() * T::lit(100.0);
    if noise > floor {
        noise
    } else {
        floor
    }
}

/// Returns the names of the columns involved in the null space of `info`, or
/// `None` when `info` has full rank. Eigenvalues below `max * 1e-8` count as
/// zero (the floor is raised to `100 eps` for `f32`).
pub fn rank_deficient_columns<T: Scalar>(info: &DMatrix<T>, names: &[String]) -> Option<Vec<String>> {
    let eig = info.clone().symmetric_eigen();
    let lmax = eig
        .eigenvalues
        .iter()
        .fold(T::zero(), |acc, &l| if l.abs() > acc { l.abs() } else { acc });
    let cutoff = lmax * rank_threshold::<T>();
    let null: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| lmax <= T::zero() || eig.eigenvalues[i] <= cutoff)
        .collect();
    if null.is_empty() {
        return None;
    }
    let weight = T::lit(1e-6).max(T::eps().sqrt() * T::lit(10.0));
    let mut cols: Vec<String> = (0..info.nrows())
        .filter(|&r| null.iter().any(|&i| eig.eigenvectors[(r, i)].abs() > weight))
        .map(|r| names.get(r).cloned().unwrap_or_else(|| format!("col{r}")))
        .collect();
    if cols.is_empty() {
        cols = names.to_vec();
    }
    Some(cols)
}

/// True iff the information matrix has full rank under the rank tolerance.
pub fn has_full_rank<T: Scalar>(info: &DMatrix<T>) -> bool {
    let eig = info.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(T::zero(), |a, &l| a.max(l.abs()));
    if lmax <= T::zero() {
        return false;
    }
    let cutoff = lmax * rank_threshold::<T>();
    eig.eigenvalues.iter().all(|&l| l > cutoff)
}

/// Leading `q x q` block of `info^{-1}`, without a rank check. `None` if the
/// Cholesky factorization fails.
pub fn leading_inverse_block<T: Scalar>(info: &DMatrix<T>, q: usize) -> Option<DMatrix<T>> {
    let p = info.nrows();
    let chol = info.clone().cholesky()?;
    let rhs = DMatrix::from_fn(p, q, |r, c| if r == c { T::one() } else { T::zero() });
    let sol = chol.solve(&rhs);
    let block = sol.rows(0, q).into_owned();
    Some((&block + block.transpose()) * T::lit(0.5))
}

/// Covariance of the first `q` fixed effects from a full information matrix.
///
/// Rank deficiency is reported as [`Error::NotIdentifiable`] naming the
/// offending columns. Inversion uses Cholesky and falls back to an
/// eigendecomposition when the factorization breaks down.
pub fn covariance_from_information<T: Scalar>(
    info: &DMatrix<T>,
    q: usize,
    names: &[String],
) -> Result<CovarianceSummary<T>> {
    if let Some(columns) = rank_deficient_columns(info, names) {
        return Err(Error::NotIdentifiable { columns });
    }
    let lambda = match leading_inverse_block(info, q) {
        Some(l) => l,
        None => {
            let eig = info.clone().symmetric_eigen();
            let inv_vals = eig.eigenvalues.map(|l| T::one() / l);
            let inv = &eig.eigenvectors
                * DMatrix::from_diagonal(&inv_vals)
                * eig.eigenvectors.transpose();
            let block = inv.view((0, 0), (q, q)).into_owned();
            (&block + block.transpose()) * T::lit(0.5)
        }
    };
    Ok(CovarianceSummary::from_lambda(lambda))
}

/// Covariance matrix `Lambda_q` of the treatment-effect estimators for a design.
pub fn treatment_covariance<T: Scalar>(
    design: &Design,
    vc: &VarianceComponents<T>,
) -> Result<CovarianceSummary<T>> {
    let engine = InformationEngine::new(design.m(), design.periods(), design.arms(), vc)?;
    let info = engine.information(design.allocation());
    let names = fixed_effect_names(design.arms(), design.periods());
    covariance_from_information(&info, design.q(), &names)
}

/// Whether the fixed effects are estimable for this allocation.
///
/// With a degenerate `vc` (no positive definite `V`) the unit-weighted
/// information is used instead, which has the same rank.
pub fn is_identifiable<T: Scalar>(design: &Design, vc: &VarianceComponents<T>) -> bool {
    let info = match InformationEngine::new(design.m(), design.periods(), design.arms(), vc) {
        Ok(engine) => engine.information(design.allocation()),
        Err(_) => unit_information::<T>(design.allocation(), design.arms()),
    };
    has_full_rank(&info)
}
