//! Cross-entropy search for a fixed `(m, C, T)`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::designspace::{enumerate_sequences, Restriction};
use crate::error::{Error, Result};
use crate::inference::{critical_value, PowerSpec};
use crate::model::{has_full_rank, unit_information, Design, Sequence, VarianceComponents};

use super::kernel::{Kernel, PowerGate};
use super::{describe, tie_break, Objective, SearchOutcome, CRITERION_TIE_TOLERANCE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CEParams {
    pub population_size: usize,
    pub elite_fraction: f64,
    pub smoothing: f64,
    pub max_iterations: usize,
    pub stall_limit: usize,
    pub seed: u64,
}

impl Default for CEParams {
    fn default() -> Self {
        CEParams {
            population_size: 1000,
            elite_fraction: 0.1,
            smoothing: 0.7,
            max_iterations: 200,
            stall_limit: 20,
            seed: 1,
        }
    }
}

impl CEParams {
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::Validation("population_size must be positive".into()));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0) {
            return Err(Error::Validation("elite_fraction must lie in (0, 1)".into()));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::Validation("smoothing must lie in (0, 1]".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Validation("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Scored {
    value: f64,
    feasible: bool,
    rows: Vec<u16>,
}

/// Cross-entropy minimization of the raw criterion over allocation matrices.
///
/// Each cluster draws its sequence from its own categorical distribution over
/// the sequence pool. Non-identifiable samples, samples breaking a
/// matrix-level restriction, and samples failing the power requirement score
/// `+inf`. Deterministic for a given seed regardless of thread count.
#[allow(clippy::too_many_arguments)]
pub fn cross_entropy_search(
    clusters: usize,
    periods: usize,
    m: usize,
    arms: usize,
    restrictions: &[Restriction],
    vc: &VarianceComponents<f64>,
    objective: &Objective,
    spec: &PowerSpec,
    params: &CEParams,
) -> Result<SearchOutcome> {
    params.validate()?;
    objective.validate()?;
    // Validates the dimensions.
    let _ = Design::with_dims(m, clusters, periods, arms, vec![vec![0; periods]; clusters])?;
    let q = arms - 1;
    spec.validate(q)?;
    let e = critical_value(spec.alpha, q, spec.correction)?;
    let gate = PowerGate::new(spec, e);
    let pool = enumerate_sequences(periods, arms, restrictions);
    if pool.is_empty() {
        return Err(Error::SearchFailure("the restrictions leave no admissible sequence".into()));
    }
    let kernel = Kernel::new(&pool, m, periods, arms, vc)?;
    let equal = restrictions.contains(&Restriction::EqualSequenceAllocation);
    let n = pool.len();

    let score = |rows: &[u16]| -> Scored {
        let mut sorted = rows.to_vec();
        sorted.sort_unstable();
        let x: Vec<Sequence> = sorted.iter().map(|&i| pool[usize::from(i)].clone()).collect();
        let infeasible = Scored {
            value: f64::INFINITY,
            feasible: false,
            rows: sorted.clone(),
        };
        if equal && !crate::designspace::check_restrictions(&x, &[Restriction::EqualSequenceAllocation], arms) {
            return infeasible;
        }
        if !has_full_rank(&unit_information::<f64>(&x, arms)) {
            return infeasible;
        }
        let mut scratch = kernel.scratch();
        match kernel.lambda(&sorted, &mut scratch) {
            Some(det) => Scored {
                value: kernel.criterion(objective.criterion, det, &scratch),
                feasible: gate.passes(q, &scratch.lambda),
                rows: sorted,
            },
            None => infeasible,
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut probs = vec![vec![1.0 / n as f64; n]; clusters];
    let n_elite = ((params.population_size as f64 * params.elite_fraction).ceil() as usize).max(1);
    let mut best: Option<Scored> = None;
    let mut best_any: Option<Scored> = None;
    let mut evaluated = 0u64;
    let mut n_feasible = 0u64;
    let mut stall = 0usize;

    let better = |a: &Scored, b: &Scored| -> bool {
        let tol = CRITERION_TIE_TOLERANCE * b.value.abs();
        if a.value < b.value - tol {
            return true;
        }
        if a.value > b.value + tol {
            return false;
        }
        let xa: Vec<Sequence> = a.rows.iter().map(|&i| pool[usize::from(i)].clone()).collect();
        let xb: Vec<Sequence> = b.rows.iter().map(|&i| pool[usize::from(i)].clone()).collect();
        tie_break((0.0, &xa, m), (0.0, &xb, m)).is_lt()
    };

    for _ in 0..params.max_iterations {
        let samplers: Vec<WeightedIndex<f64>> = probs
            .iter()
            .map(|p| WeightedIndex::new(p).expect("probabilities are positive somewhere"))
            .collect();
        let population: Vec<Vec<u16>> = (0..params.population_size)
            .map(|_| samplers.iter().map(|s| s.sample(&mut rng) as u16).collect())
            .collect();
        let mut scored: Vec<(usize, Scored)> = population
            .par_iter()
            .map(|rows| score(rows))
            .enumerate()
            .collect();
        evaluated += scored.len() as u64;

        let mut improved = false;
        for (_, s) in &scored {
            if s.value.is_finite() {
                if best_any.as_ref().map_or(true, |b| better(s, b)) {
                    best_any = Some(s.clone());
                }
                if s.feasible {
                    n_feasible += 1;
                    if best.as_ref().map_or(true, |b| s.value < b.value - CRITERION_TIE_TOLERANCE * b.value.abs()) {
                        improved = true;
                    }
                    if best.as_ref().map_or(true, |b| better(s, b)) {
                        best = Some(s.clone());
                    }
                }
            }
        }

        let objective_of = |s: &Scored| if s.feasible { s.value } else { f64::INFINITY };
        scored.sort_by(|a, b| objective_of(&a.1).total_cmp(&objective_of(&b.1)).then(a.0.cmp(&b.0)));
        let elites: Vec<&Vec<u16>> = scored
            .iter()
            .take(n_elite)
            .filter(|(_, s)| s.feasible && s.value.is_finite())
            .map(|(i, _)| &population[*i])
            .collect();
        if !elites.is_empty() {
            for (c, p) in probs.iter_mut().enumerate() {
                let mut freq = vec![0.0; n];
                for e in &elites {
                    freq[usize::from(e[c])] += 1.0;
                }
                for (pi, fi) in p.iter_mut().zip(freq) {
                    *pi = params.smoothing * fi / elites.len() as f64 + (1.0 - params.smoothing) * *pi;
                }
            }
        }

        if improved {
            stall = 0;
        } else {
            stall += 1;
            if stall >= params.stall_limit {
                break;
            }
        }
    }

    let to_design = |s: &Scored| {
        let x = s.rows.iter().map(|&i| pool[usize::from(i)].clone()).collect();
        Design::with_dims(m, clusters, periods, arms, x)
    };
    match (best, best_any) {
        (Some(b), _) => {
            let mut r = describe(to_design(&b)?, vc, spec, objective)?;
            r.n_evaluated = evaluated;
            r.n_feasible = n_feasible;
            Ok(SearchOutcome::Admissible(r))
        }
        (None, Some(b)) => {
            let mut r = describe(to_design(&b)?, vc, spec, objective)?;
            r.n_evaluated = evaluated;
            Ok(SearchOutcome::NoAdmissibleDesign { suggestion: r })
        }
        (None, None) => Err(Error::SearchFailure(
            "no identifiable allocation was sampled; increase population_size".into(),
        )),
    }
}
