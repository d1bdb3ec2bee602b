//! Constrained design spaces and their enumeration.
//!
//! A space fixes the allowed period counts, the allowed cluster counts per
//! period count, the allowed `m` per `(C, T)`, and a conjunction of
//! restrictions on the allocation matrix. Restrictions that act on single
//! rows are applied while building the sequence pool; the rest filter whole
//! matrices. Allocation matrices are enumerated as multisets of rows (sorted
//! rows), since every criterion is invariant to row order.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    has_full_rank, unit_information, Design, InformationEngine, Label, Sequence,
    VarianceComponents,
};

/// Whitelist of allowed sequences under a name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustomPredicate {
    pub name: String,
    pub allowed_sequences: Vec<Sequence>,
}

/// A restriction on the allocation matrix `X`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restriction {
    /// `X_ij >= X_i,j-1`.
    MonotoneNondecreasing,
    /// The fixed effects are estimable.
    Identifiable,
    /// Every row visits every arm.
    AllInterventionsPerCluster,
    /// Every distinct row appears the same number of times.
    EqualSequenceAllocation,
    /// Every row starts on arm 0 and ends on arm `D - 1`.
    StartControlEndTreatment,
    Custom(CustomPredicate),
}

impl Restriction {
    /// Whether the restriction can be decided one row at a time.
    pub fn is_row_level(&self) -> bool {
        !matches!(self, Restriction::Identifiable | Restriction::EqualSequenceAllocation)
    }

    /// Row-level check; matrix-level restrictions accept every row.
    pub fn allows_sequence(&self, seq: &[Label], arms: usize) -> bool {
        match self {
            Restriction::MonotoneNondecreasing => seq.windows(2).all(|w| w[1] >= w[0]),
            Restriction::AllInterventionsPerCluster => {
                (0..arms).all(|d| seq.iter().any(|&x| usize::from(x) == d))
            }
            Restriction::StartControlEndTreatment => {
                seq.first() == Some(&0) && seq.last().map(|&x| usize::from(x)) == Some(arms - 1)
            }
            Restriction::Custom(p) => p.allowed_sequences.iter().any(|s| s == seq),
            Restriction::Identifiable | Restriction::EqualSequenceAllocation => true,
        }
    }
}

/// All sequences of length `periods` over `0..arms` satisfying the row-level
/// restrictions, in lexicographic order.
pub fn enumerate_sequences(periods: usize, arms: usize, restrictions: &[Restriction]) -> Vec<Sequence> {
    let monotone = restrictions.contains(&Restriction::MonotoneNondecreasing);
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(periods);
    fill_sequences(periods, arms, monotone, &mut current, &mut out);
    out.retain(|s| restrictions.iter().all(|r| r.allows_sequence(s, arms)));
    out
}

fn fill_sequences(
    periods: usize,
    arms: usize,
    monotone: bool,
    current: &mut Sequence,
    out: &mut Vec<Sequence>,
) {
    if current.len() == periods {
        out.push(current.clone());
        return;
    }
    let start = if monotone { current.last().copied().unwrap_or(0) } else { 0 };
    for label in u16::from(start)..arms as u16 {
        current.push(label as Label);
        fill_sequences(periods, arms, monotone, current, out);
        current.pop();
    }
}

/// `binomial(n, k)` in `u128`, saturating on overflow.
pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(u128::from(n - i)) {
            Some(v) => v / u128::from(i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Number of multisets of size `k` drawn from `n` items.
pub fn multiset_count(n: usize, k: usize) -> u128 {
    if n == 0 {
        return u128::from(k == 0);
    }
    binomial((n + k - 1) as u64, k as u64)
}

/// Non-decreasing index tuples of length `k` over `0..n`, in lexicographic order.
#[derive(Clone, Debug)]
pub struct Multisets {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Multisets {
    pub fn new(n: usize, k: usize) -> Self {
        Self::starting_at(n, k, 0)
    }

    /// Tuples whose entries are all at least `floor`.
    pub fn starting_at(n: usize, k: usize, floor: usize) -> Self {
        let current = if floor < n || k == 0 { Some(vec![floor; k]) } else { None };
        Multisets { n, current }
    }
}

impl Iterator for Multisets {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.take()?;
        let mut next = out.clone();
        if let Some(pos) = next.iter().rposition(|&i| i + 1 < self.n) {
            let v = next[pos] + 1;
            for slot in &mut next[pos..] {
                *slot = v;
            }
            self.current = Some(next);
        }
        Some(out)
    }
}

/// The constrained design space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DesignSpaceRepr", into = "DesignSpaceRepr")]
pub struct DesignSpace {
    arms: usize,
    periods: BTreeSet<usize>,
    clusters: BTreeMap<usize, BTreeSet<usize>>,
    measurements: BTreeMap<(usize, usize), BTreeSet<usize>>,
    restrictions: Vec<Restriction>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MeasurementSet {
    #[serde(rename = "C")]
    clusters: usize,
    #[serde(rename = "T")]
    periods: usize,
    m: BTreeSet<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DesignSpaceRepr {
    #[serde(rename = "D")]
    arms: usize,
    #[serde(rename = "T")]
    periods: BTreeSet<usize>,
    /// Keyed by `T`.
    #[serde(rename = "C")]
    clusters: BTreeMap<usize, BTreeSet<usize>>,
    #[serde(rename = "M")]
    measurements: Vec<MeasurementSet>,
    #[serde(default)]
    restrictions: Vec<Restriction>,
}

impl TryFrom<DesignSpaceRepr> for DesignSpace {
    type Error = Error;

    fn try_from(r: DesignSpaceRepr) -> Result<Self> {
        let mut measurements = BTreeMap::new();
        for s in r.measurements {
            if measurements.insert((s.clusters, s.periods), s.m).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate M entry for C={}, T={}",
                    s.clusters, s.periods
                )));
            }
        }
        let space = DesignSpace {
            arms: r.arms,
            periods: r.periods,
            clusters: r.clusters,
            measurements,
            restrictions: r.restrictions,
        };
        space.validate()?;
        Ok(space)
    }
}

impl From<DesignSpace> for DesignSpaceRepr {
    fn from(s: DesignSpace) -> Self {
        DesignSpaceRepr {
            arms: s.arms,
            periods: s.periods,
            clusters: s.clusters,
            measurements: s
                .measurements
                .into_iter()
                .map(|((c, t), m)| MeasurementSet {
                    clusters: c,
                    periods: t,
                    m,
                })
                .collect(),
            restrictions: s.restrictions,
        }
    }
}

impl DesignSpace {
    /// Builds a space from rules giving the cluster counts per `T` and `m` per `(C, T)`.
    pub fn from_rules(
        arms: usize,
        periods: impl IntoIterator<Item = usize>,
        clusters_for: impl Fn(usize) -> Vec<usize>,
        measurements_for: impl Fn(usize, usize) -> Vec<usize>,
        restrictions: Vec<Restriction>,
    ) -> Result<Self> {
        let periods: BTreeSet<usize> = periods.into_iter().collect();
        let mut clusters = BTreeMap::new();
        let mut measurements = BTreeMap::new();
        for &t in &periods {
            let cs: BTreeSet<usize> = clusters_for(t).into_iter().collect();
            for &c in &cs {
                measurements.insert((c, t), measurements_for(c, t).into_iter().collect());
            }
            clusters.insert(t, cs);
        }
        let space = DesignSpace {
            arms,
            periods,
            clusters,
            measurements,
            restrictions,
        };
        space.validate()?;
        Ok(space)
    }

    /// Space with the same cluster and `m` sets for every period count.
    pub fn uniform(
        arms: usize,
        periods: &[usize],
        clusters: &[usize],
        measurements: &[usize],
        restrictions: Vec<Restriction>,
    ) -> Result<Self> {
        Self::from_rules(
            arms,
            periods.iter().copied(),
            |_| clusters.to_vec(),
            |_, _| measurements.to_vec(),
            restrictions,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.arms) {
            return Err(Error::Validation(format!("D must be in 2..=256, got {}", self.arms)));
        }
        if self.periods.is_empty() {
            return Err(Error::Validation("the set of period counts is empty".into()));
        }
        for &t in &self.periods {
            if t < 2 {
                return Err(Error::Validation(format!("T must be at least 2, got {t}")));
            }
            let cs = self
                .clusters
                .get(&t)
                .filter(|c| !c.is_empty())
                .ok_or_else(|| Error::Validation(format!("no cluster counts for T={t}")))?;
            for &c in cs {
                if c < 2 {
                    return Err(Error::Validation(format!("C must be at least 2, got {c}")));
                }
                let ms = self
                    .measurements
                    .get(&(c, t))
                    .filter(|m| !m.is_empty())
                    .ok_or_else(|| Error::Validation(format!("no m values for C={c}, T={t}")))?;
                if let Some(&m) = ms.iter().find(|&&m| m < 2) {
                    return Err(Error::Validation(format!("m must be at least 2, got {m}")));
                }
            }
        }
        Ok(())
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn periods(&self) -> impl Iterator<Item = usize> + '_ {
        self.periods.iter().copied()
    }

    pub fn clusters(&self, periods: usize) -> impl Iterator<Item = usize> + '_ {
        self.clusters.get(&periods).into_iter().flatten().copied()
    }

    pub fn measurements(&self, clusters: usize, periods: usize) -> impl Iterator<Item = usize> + '_ {
        self.measurements.get(&(clusters, periods)).into_iter().flatten().copied()
    }

    pub fn restrictions(&self) -> &[Restriction] {
        &self.restrictions
    }

    pub fn with_restrictions(mut self, restrictions: Vec<Restriction>) -> Self {
        self.restrictions = restrictions;
        self
    }

    /// Row-level sequence pool for `periods`.
    pub fn sequences(&self, periods: usize) -> Vec<Sequence> {
        enumerate_sequences(periods, self.arms, &self.restrictions)
    }

    /// Number of `(m, X)` candidates before matrix-level filtering.
    pub fn raw_candidate_count(&self) -> u128 {
        let mut total: u128 = 0;
        for t in self.periods() {
            let pool = self.sequences(t).len();
            for c in self.clusters(t) {
                let ms = self.measurements(c, t).count() as u128;
                total = total.saturating_add(multiset_count(pool, c).saturating_mul(ms));
            }
        }
        total
    }
}

/// True iff every restriction holds for `X`.
pub fn check_restrictions(x: &[Sequence], restrictions: &[Restriction], arms: usize) -> bool {
    restrictions.iter().all(|r| match r {
        Restriction::Identifiable => !x.is_empty() && has_full_rank(&unit_information::<f64>(x, arms)),
        Restriction::EqualSequenceAllocation => equal_allocation(x),
        row_level => x.iter().all(|s| row_level.allows_sequence(s, arms)),
    })
}

fn equal_allocation(x: &[Sequence]) -> bool {
    let mut counts: BTreeMap<&Sequence, usize> = BTreeMap::new();
    for s in x {
        *counts.entry(s).or_default() += 1;
    }
    let mut it = counts.values();
    match it.next() {
        Some(&first) => it.all(|&c| c == first),
        None => true,
    }
}

/// Allocation matrices of one `(T, C)` cell that pass every matrix-level
/// restriction and are identifiable, stored as indices into the pool.
#[derive(Clone, Debug)]
pub struct CandidateBlock {
    pub periods: usize,
    pub clusters: usize,
    pub measurements: Vec<usize>,
    pub pool: Arc<Vec<Sequence>>,
    /// Row-major `len x clusters` pool indices; each row is non-decreasing.
    indices: Vec<u16>,
}

impl CandidateBlock {
    pub fn len(&self) -> usize {
        self.indices.len() / self.clusters.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Pool indices of candidate `i`.
    pub fn candidate(&self, i: usize) -> &[u16] {
        &self.indices[i * self.clusters..(i + 1) * self.clusters]
    }

    /// Allocation matrix of candidate `i` with rows in canonical order.
    pub fn allocation(&self, i: usize) -> Vec<Sequence> {
        self.candidate(i).iter().map(|&s| self.pool[usize::from(s)].clone()).collect()
    }
}

/// Enumerates and filters every allocation matrix of the space.
///
/// Identifiability is decided on the unit-weighted information, which has the
/// same rank as the GLS information for every positive definite `V`.
/// Returns [`Error::CandidateCapExceeded`] before doing any work when the raw
/// `(m, X)` count is above `cap`.
pub fn prepare_candidates(space: &DesignSpace, cap: u128) -> Result<Vec<CandidateBlock>> {
    space.validate()?;
    let raw = space.raw_candidate_count();
    if raw > cap {
        return Err(Error::CandidateCapExceeded { candidates: raw, cap });
    }
    let arms = space.arms();
    let equal = space.restrictions().contains(&Restriction::EqualSequenceAllocation);
    let mut blocks = Vec::new();
    for t in space.periods() {
        let pool = Arc::new(space.sequences(t));
        if pool.len() > usize::from(u16::MAX) {
            return Err(Error::Validation(format!("sequence pool for T={t} is too large")));
        }
        let n = pool.len();
        for c in space.clusters(t) {
            let measurements: Vec<usize> = space.measurements(c, t).collect();
            let indices = if n == 0 {
                Vec::new()
            } else {
                filter_multisets(&pool, n, c, arms, equal)
            };
            blocks.push(CandidateBlock {
                periods: t,
                clusters: c,
                measurements,
                pool: Arc::clone(&pool),
                indices,
            });
        }
    }
    Ok(blocks)
}

fn filter_multisets(pool: &[Sequence], n: usize, c: usize, arms: usize, equal: bool) -> Vec<u16> {
    let p = pool.first().map_or(0, |s| crate::model::n_fixed_effects(arms, s.len()));
    let grams: Vec<Vec<i64>> = pool.iter().map(|s| unit_gram(s, arms)).collect();
    // Partition by the first row so the work can be spread across threads;
    // concatenating the parts in order keeps the lexicographic order.
    let parts: Vec<Vec<u16>> = (0..n)
        .into_par_iter()
        .map(|first| {
            let mut out = Vec::new();
            let mut sum = vec![0i64; p * p];
            for rest in Multisets::starting_at(n, c - 1, first) {
                if equal && !equal_index_allocation(first, &rest) {
                    continue;
                }
                sum.copy_from_slice(&grams[first]);
                for &i in &rest {
                    for (a, b) in sum.iter_mut().zip(&grams[i]) {
                        *a += b;
                    }
                }
                let full = integer_full_rank(&sum, p).unwrap_or_else(|| {
                    let info = nalgebra::DMatrix::from_fn(p, p, |r, c| sum[r * p + c] as f64);
                    has_full_rank(&info)
                });
                if !full {
                    continue;
                }
                out.push(first as u16);
                out.extend(rest.iter().map(|&i| i as u16));
            }
            out
        })
        .collect();
    parts.concat()
}

fn equal_index_allocation(first: usize, rest: &[usize]) -> bool {
    let mut run = 1;
    let mut size = None;
    let mut prev = first;
    for &i in rest {
        if i == prev {
            run += 1;
        } else {
            if *size.get_or_insert(run) != run {
                return false;
            }
            run = 1;
            prev = i;
        }
    }
    size.map_or(true, |s| s == run)
}

/// `B'B` of one sequence as a row-major integer matrix.
fn unit_gram(seq: &[Label], arms: usize) -> Vec<i64> {
    let b = crate::model::sequence_design::<f64>(seq, arms);
    let g = b.transpose() * b;
    let p = g.nrows();
    (0..p * p).map(|k| g[(k / p, k % p)].round() as i64).collect()
}

/// Exact full-rank test of a symmetric integer matrix by fraction-free
/// elimination; `None` on overflow.
fn integer_full_rank(a: &[i64], p: usize) -> Option<bool> {
    let mut m: Vec<i128> = a.iter().map(|&x| i128::from(x)).collect();
    let mut prev: i128 = 1;
    for k in 0..p {
        let Some(piv) = (k..p).find(|&r| m[r * p + k] != 0) else {
            return Some(false);
        };
        if piv != k {
            for j in 0..p {
                m.swap(k * p + j, piv * p + j);
            }
        }
        let akk = m[k * p + k];
        for i in k + 1..p {
            let aik = m[i * p + k];
            for j in k + 1..p {
                let lhs = akk.checked_mul(m[i * p + j])?;
                let rhs = aik.checked_mul(m[k * p + j])?;
                m[i * p + j] = lhs.checked_sub(rhs)? / prev;
            }
            m[i * p + k] = 0;
        }
        prev = akk;
    }
    Some(true)
}

/// Every admissible design of the space, each exactly once with sorted rows.
///
/// Order: `T` ascending, then `C` ascending, then `X` lexicographically, then `m`
/// ascending. Identifiability is checked under `vc` (falling back to the
/// unit-weighted information when `vc` does not give a positive definite `V`).
pub fn enumerate_designs<'a>(
    space: &'a DesignSpace,
    vc: &'a VarianceComponents<f64>,
) -> Box<dyn Iterator<Item = Design> + 'a> {
    let arms = space.arms();
    let equal = space.restrictions().contains(&Restriction::EqualSequenceAllocation);
    let iter = space.periods().flat_map(move |t| {
        let pool = Arc::new(space.sequences(t));
        space.clusters(t).flat_map(move |c| {
            let ms: Vec<usize> = space.measurements(c, t).collect();
            let engine = ms
                .first()
                .and_then(|&m| InformationEngine::new(m, t, arms, vc).ok());
            let pool = Arc::clone(&pool);
            let n = pool.len();
            let multisets = if n == 0 { None } else { Some(Multisets::new(n, c)) };
            multisets.into_iter().flatten().flat_map(move |idx| {
                let rows: Vec<Sequence> = idx.iter().map(|&i| pool[i].clone()).collect();
                let keep = (!equal || equal_allocation(&rows))
                    && match &engine {
                        Some(e) => has_full_rank(&e.information(&rows)),
                        None => has_full_rank(&unit_information::<f64>(&rows, arms)),
                    };
                let designs: Vec<Design> = if keep {
                    ms.iter()
                        .filter_map(|&m| Design::with_dims(m, c, t, arms, rows.clone()).ok())
                        .collect()
                } else {
                    Vec::new()
                };
                designs
            })
        })
    });
    Box::new(iter)
}

#[cfg(test)]
mod tests {
    use super::*;

    use Restriction::*;

    #[test]
    fn sequence_counts() {
        assert_eq!(enumerate_sequences(6, 2, &[MonotoneNondecreasing]).len(), 7);
        let sc = enumerate_sequences(6, 2, &[MonotoneNondecreasing, StartControlEndTreatment]);
        assert_eq!(sc.len(), 5);
        for (t, s) in (1..=5).zip(&sc) {
            assert_eq!(s.iter().filter(|&&x| x == 1).count(), t);
            assert_eq!(s[0], 0);
        }
        assert_eq!(enumerate_sequences(8, 4, &[MonotoneNondecreasing]).len(), 165);
        assert_eq!(enumerate_sequences(3, 2, &[]).len(), 8);
        assert!(enumerate_sequences(2, 3, &[MonotoneNondecreasing, AllInterventionsPerCluster]).is_empty());
    }

    #[test]
    fn sequences_are_lexicographic() {
        let s = enumerate_sequences(5, 3, &[MonotoneNondecreasing]);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.len() as u128, binomial(7, 2));
    }

    #[test]
    fn multiset_iterator() {
        let all: Vec<_> = Multisets::new(3, 2).collect();
        assert_eq!(all, vec![vec![0, 0], vec![0, 1], vec![0, 2], vec![1, 1], vec![1, 2], vec![2, 2]]);
        assert_eq!(Multisets::new(7, 10).count() as u128, binomial(16, 6));
        assert_eq!(multiset_count(28, 6), 1_107_568);
        assert_eq!(Multisets::starting_at(3, 2, 2).count(), 1);
    }

    #[test]
    fn restriction_checks() {
        let x = vec![
            vec![0, 0, 0, 1, 1, 2],
            vec![0, 0, 0, 1, 1, 2],
            vec![0, 0, 1, 1, 2, 2],
            vec![0, 0, 1, 1, 2, 2],
            vec![0, 1, 1, 2, 2, 2],
            vec![0, 1, 1, 2, 2, 2],
        ];
        assert!(check_restrictions(&x, &[MonotoneNondecreasing, AllInterventionsPerCluster], 3));
        assert!(check_restrictions(&x, &[Identifiable], 3));
        let bad = vec![vec![0, 1, 0, 1, 1, 1], vec![0, 0, 0, 1, 1, 1]];
        assert!(!check_restrictions(&bad, &[MonotoneNondecreasing], 2));
        let mut parallel = vec![vec![0u8; 6]; 5];
        parallel.extend(vec![vec![1u8; 6]; 5]);
        assert!(check_restrictions(&parallel, &[EqualSequenceAllocation], 2));
        parallel[0][5] = 1;
        assert!(!check_restrictions(&parallel, &[EqualSequenceAllocation], 2));
        let custom = Custom(CustomPredicate {
            name: "two".into(),
            allowed_sequences: vec![vec![0, 1], vec![1, 1]],
        });
        assert!(check_restrictions(&[vec![0, 1], vec![1, 1]], &[custom.clone()], 2));
        assert!(!check_restrictions(&[vec![0, 0], vec![1, 1]], &[custom], 2));
    }

    #[test]
    fn space_validation() {
        assert!(DesignSpace::uniform(2, &[6], &[10], &[10], vec![]).is_ok());
        assert!(DesignSpace::uniform(2, &[1], &[10], &[10], vec![]).is_err());
        assert!(DesignSpace::uniform(2, &[6], &[1], &[10], vec![]).is_err());
        assert!(DesignSpace::uniform(2, &[6], &[10], &[1], vec![]).is_err());
        assert!(DesignSpace::uniform(2, &[6], &[], &[10], vec![]).is_err());
    }

    #[test]
    fn space_json_round_trip() {
        let space = DesignSpace::from_rules(
            3,
            2..=6,
            |_| (2..=6).collect(),
            |_, t| (2..=48 / t).collect(),
            vec![MonotoneNondecreasing, Identifiable],
        )
        .unwrap();
        let s = serde_json::to_string(&space).unwrap();
        let back: DesignSpace = serde_json::from_str(&s).unwrap();
        assert_eq!(back, space);
        assert_eq!(back.measurements(3, 5).max(), Some(9));
    }

    #[test]
    fn two_arm_counts() {
        let space = DesignSpace::uniform(2, &[6], &[10], &[10], vec![MonotoneNondecreasing, Identifiable]).unwrap();
        assert_eq!(space.raw_candidate_count(), 8008);
        let blocks = prepare_candidates(&space, u128::MAX).unwrap();
        assert_eq!(blocks[0].len(), 8008 - 7);
        let cap = prepare_candidates(&space, 100);
        assert!(matches!(cap, Err(Error::CandidateCapExceeded { candidates: 8008, cap: 100 })));
    }

    #[test]
    fn all_interventions_in_two_periods_is_empty() {
        let space = DesignSpace::uniform(3, &[2], &[4], &[2], vec![MonotoneNondecreasing, AllInterventionsPerCluster]).unwrap();
        let vc = VarianceComponents::cross_sectional(1.0, 0.05).unwrap();
        assert_eq!(enumerate_designs(&space, &vc).count(), 0);
        assert!(prepare_candidates(&space, u128::MAX).unwrap()[0].is_empty());
    }
}
