//! Exhaustive search over a prepared design space.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;

use rayon::prelude::*;

use crate::designspace::{prepare_candidates, CandidateBlock, DesignSpace};
use crate::error::{Error, Result};
use crate::inference::{critical_value, PowerSpec};
use crate::model::{Design, VarianceComponents};

use super::kernel::{Kernel, PowerGate};
use super::{
    describe, tie_break, Objective, Progress, Scaling, ScalingDomain, SearchOutcome, CRITERION_TIE_TOLERANCE,
    DEFAULT_CANDIDATE_CAP, OBJECTIVE_TIE_TOLERANCE,
};

/// Options of an exhaustive search.
#[derive(Clone)]
pub struct SearchOptions {
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
    pub candidate_cap: u128,
    /// Called after each `(C, T, m)` cell.
    pub progress: Option<Arc<dyn Fn(&Progress) + Send + Sync>>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            workers: None,
            candidate_cap: DEFAULT_CANDIDATE_CAP,
            progress: None,
        }
    }
}

impl std::fmt::Debug for SearchOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SearchOptions")
            .field("workers", &self.workers)
            .field("candidate_cap", &self.candidate_cap)
            .field("progress", &self.progress.is_some())
            .finish()
    }
}

/// Exhaustive search with default options.
pub fn exhaustive_search(
    space: &DesignSpace,
    vc: &VarianceComponents<f64>,
    spec: &PowerSpec,
    objective: &Objective,
) -> Result<SearchOutcome> {
    exhaustive_search_with(space, vc, spec, objective, &SearchOptions::default())
}

pub fn exhaustive_search_with(
    space: &DesignSpace,
    vc: &VarianceComponents<f64>,
    spec: &PowerSpec,
    objective: &Objective,
    options: &SearchOptions,
) -> Result<SearchOutcome> {
    let prepared = PreparedSpace::new(space, options.candidate_cap)?;
    prepared.search(vc, spec, objective, options)
}

/// A design space whose allocation matrices have been enumerated and
/// filtered once, for repeated searches under different variance components.
#[derive(Clone, Debug)]
pub struct PreparedSpace {
    space: DesignSpace,
    blocks: Vec<CandidateBlock>,
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    value: f64,
    cost: f64,
    block: usize,
    index: usize,
    m: usize,
}

/// Candidates within the tie tolerance of the smallest value seen.
#[derive(Clone, Debug)]
struct NearBest {
    best: f64,
    items: Vec<Candidate>,
}

impl Default for NearBest {
    fn default() -> Self {
        NearBest {
            best: f64::INFINITY,
            items: Vec::new(),
        }
    }
}

impl NearBest {
    fn push(&mut self, c: Candidate) {
        let best = self.best.min(c.value);
        let limit = best + CRITERION_TIE_TOLERANCE * best.abs();
        if c.value > limit {
            return;
        }
        if c.value < self.best {
            self.best = c.value;
            self.items.retain(|x| x.value <= limit);
        }
        self.items.push(c);
    }

    fn merge(mut self, other: NearBest) -> NearBest {
        for c in other.items {
            self.push(c);
        }
        self
    }
}

#[derive(Clone, Debug, Default)]
struct Accumulator {
    evaluated: u64,
    feasible: u64,
    cost_range: Option<(f64, f64)>,
    criterion_range: Option<(f64, f64)>,
    unconstrained: NearBest,
    unconstrained_range: Option<(f64, f64)>,
    unconstrained_cost_range: Option<(f64, f64)>,
    /// Per cost level (keyed by the bit pattern of a non-negative cost).
    levels: BTreeMap<u64, NearBest>,
}

fn widen(range: Option<(f64, f64)>, x: f64) -> Option<(f64, f64)> {
    Some(match range {
        Some((lo, hi)) => (lo.min(x), hi.max(x)),
        None => (x, x),
    })
}

fn join(a: Option<(f64, f64)>, b: Option<(f64, f64)>) -> Option<(f64, f64)> {
    match (a, b) {
        (Some((l1, h1)), Some((l2, h2))) => Some((l1.min(l2), h1.max(h2))),
        (x, None) | (None, x) => x,
    }
}

impl Accumulator {
    fn record(&mut self, c: Candidate, feasible: bool) {
        self.evaluated += 1;
        self.unconstrained.push(c);
        self.unconstrained_range = widen(self.unconstrained_range, c.value);
        self.unconstrained_cost_range = widen(self.unconstrained_cost_range, c.cost);
        if feasible {
            self.feasible += 1;
            self.cost_range = widen(self.cost_range, c.cost);
            self.criterion_range = widen(self.criterion_range, c.value);
            self.levels.entry(c.cost.to_bits()).or_default().push(c);
        }
    }

    fn merge(mut self, other: Accumulator) -> Accumulator {
        self.evaluated += other.evaluated;
        self.feasible += other.feasible;
        self.cost_range = join(self.cost_range, other.cost_range);
        self.criterion_range = join(self.criterion_range, other.criterion_range);
        self.unconstrained_range = join(self.unconstrained_range, other.unconstrained_range);
        self.unconstrained_cost_range = join(self.unconstrained_cost_range, other.unconstrained_cost_range);
        self.unconstrained = std::mem::take(&mut self.unconstrained).merge(other.unconstrained);
        for (k, v) in other.levels {
            let slot = self.levels.entry(k).or_default();
            *slot = std::mem::take(slot).merge(v);
        }
        self
    }
}

impl PreparedSpace {
    pub fn new(space: &DesignSpace, candidate_cap: u128) -> Result<Self> {
        Ok(PreparedSpace {
            space: space.clone(),
            blocks: prepare_candidates(space, candidate_cap)?,
        })
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    /// Number of `(m, X)` candidates that will be evaluated.
    pub fn candidate_count(&self) -> u64 {
        self.blocks
            .iter()
            .map(|b| (b.len() * b.measurements.len()) as u64)
            .sum()
    }

    /// Every prepared design, in enumeration order.
    pub fn designs(&self) -> impl Iterator<Item = Design> + '_ {
        self.blocks.iter().flat_map(move |b| {
            (0..b.len()).flat_map(move |i| {
                let x = b.allocation(i);
                b.measurements.iter().map(move |&m| {
                    Design::with_dims(m, b.clusters, b.periods, self.space.arms(), x.clone())
                        .expect("prepared candidates are valid")
                })
            })
        })
    }

    fn design(&self, c: &Candidate) -> Design {
        let b = &self.blocks[c.block];
        Design::with_dims(c.m, b.clusters, b.periods, self.space.arms(), b.allocation(c.index))
            .expect("prepared candidates are valid")
    }

    fn pick<'a>(&self, items: impl Iterator<Item = &'a Candidate>) -> Option<Candidate> {
        let mut best: Option<(Candidate, Design)> = None;
        for c in items {
            let d = self.design(c);
            let better = match &best {
                None => true,
                Some((b, bd)) => {
                    tie_break((c.cost, d.allocation(), c.m), (b.cost, bd.allocation(), b.m)).is_lt()
                }
            };
            if better {
                best = Some((*c, d));
            }
        }
        best.map(|(c, _)| c)
    }

    /// Runs the search, optionally on a dedicated pool of `options.workers` threads.
    pub fn search(
        &self,
        vc: &VarianceComponents<f64>,
        spec: &PowerSpec,
        objective: &Objective,
        options: &SearchOptions,
    ) -> Result<SearchOutcome> {
        match options.workers {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::SearchFailure(format!("cannot start worker pool: {e}")))?;
                pool.install(|| self.search_in_pool(vc, spec, objective, options))
            }
            None => self.search_in_pool(vc, spec, objective, options),
        }
    }

    fn search_in_pool(
        &self,
        vc: &VarianceComponents<f64>,
        spec: &PowerSpec,
        objective: &Objective,
        options: &SearchOptions,
    ) -> Result<SearchOutcome> {
        objective.validate()?;
        vc.validate()?;
        let q = self.space.arms() - 1;
        spec.validate(q)?;
        let e = critical_value(spec.alpha, q, spec.correction)?;
        let gate = PowerGate::new(spec, e);
        let total = self.candidate_count();
        let done = AtomicU64::new(0);
        let mut acc = Accumulator::default();

        for (bi, block) in self.blocks.iter().enumerate() {
            if block.is_empty() {
                continue;
            }
            for &m in &block.measurements {
                let kernel = Kernel::new(&block.pool, m, block.periods, self.space.arms(), vc)?;
                let cost = objective.cost.evaluate(m, block.clusters, block.periods);
                let cell = (0..block.len())
                    .into_par_iter()
                    .with_min_len(256)
                    .fold(
                        || (Accumulator::default(), kernel.scratch()),
                        |(mut acc, mut scratch), i| {
                            if let Some(det) = kernel.lambda(block.candidate(i), &mut scratch) {
                                let value = kernel.criterion(objective.criterion, det, &scratch);
                                let feasible = gate.passes(kernel.q(), &scratch.lambda);
                                acc.record(
                                    Candidate {
                                        value,
                                        cost,
                                        block: bi,
                                        index: i,
                                        m,
                                    },
                                    feasible,
                                );
                            } else {
                                acc.evaluated += 1;
                            }
                            (acc, scratch)
                        },
                    )
                    .map(|(acc, _)| acc)
                    .reduce(Accumulator::default, Accumulator::merge);
                acc = acc.merge(cell);
                let evaluated = done.fetch_add(block.len() as u64, AtomicOrdering::Relaxed) + block.len() as u64;
                if let Some(cb) = &options.progress {
                    cb(&Progress {
                        evaluated,
                        total,
                        best_criterion: acc.criterion_range.map(|r| r.0),
                    });
                }
            }
        }

        if acc.unconstrained.items.is_empty() {
            return Err(Error::SearchFailure(
                "the design space contains no identifiable design".into(),
            ));
        }

        let (evaluated, feasible) = (acc.evaluated, acc.feasible);
        if feasible == 0 {
            let fallback = Objective {
                w: 0.0,
                ..objective.clone()
            };
            let best = self
                .pick(acc.unconstrained.items.iter())
                .expect("non-empty near-best set");
            let (lo, hi) = acc.unconstrained_range.expect("non-empty range");
            let scaling = Scaling {
                cost_min: best.cost,
                cost_max: best.cost,
                criterion_min: lo,
                criterion_max: hi,
            };
            let mut suggestion = describe(self.design(&best), vc, spec, &fallback)?;
            suggestion.objective_value = fallback.value(best.cost, best.value, &scaling);
            suggestion.scaling = Some(scaling);
            suggestion.n_evaluated = evaluated;
            suggestion.n_feasible = 0;
            return Ok(SearchOutcome::NoAdmissibleDesign { suggestion });
        }

        let ((cost_min, cost_max), (criterion_min, criterion_max)) = match objective.scaling {
            ScalingDomain::Space => (
                acc.unconstrained_cost_range.expect("non-empty range"),
                acc.unconstrained_range.expect("non-empty range"),
            ),
            ScalingDomain::Feasible => (
                acc.cost_range.expect("feasible range"),
                acc.criterion_range.expect("feasible range"),
            ),
        };
        let scaling = Scaling {
            cost_min,
            cost_max,
            criterion_min,
            criterion_max,
        };
        let scored: Vec<(f64, Candidate)> = acc
            .levels
            .values()
            .flat_map(|l| l.items.iter())
            .map(|c| (objective.value(c.cost, c.value, &scaling), *c))
            .collect();
        let best_obj = scored.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let best = self
            .pick(
                scored
                    .iter()
                    .filter(|s| s.0 <= best_obj + OBJECTIVE_TIE_TOLERANCE)
                    .map(|s| &s.1),
            )
            .expect("non-empty feasible set");
        let mut result = describe(self.design(&best), vc, spec, objective)?;
        result.objective_value = objective.value(best.cost, best.value, &scaling);
        result.scaling = Some(scaling);
        result.n_evaluated = evaluated;
        result.n_feasible = feasible;
        Ok(SearchOutcome::Admissible(result))
    }
}
