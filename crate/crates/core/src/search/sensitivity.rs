//! Optimal designs over a grid of cross-sectional variance components.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::designspace::DesignSpace;
use crate::error::{Error, Result};
use crate::inference::PowerSpec;
use crate::model::{treatment_covariance, Design, Sequence, VarianceComponents};

use super::exhaustive::{PreparedSpace, SearchOptions};
use super::{criterion_value, Objective, SearchOutcome};

/// Equally spaced grid over `(sigma_c^2, sigma_eps^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub sigma_c2: (f64, f64),
    pub sigma_eps2: (f64, f64),
    pub steps_c: usize,
    pub steps_eps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            sigma_c2: (0.001, 0.25),
            sigma_eps2: (0.25, 4.0),
            steps_c: 26,
            steps_eps: 26,
        }
    }
}

fn axis(range: (f64, f64), steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![range.0];
    }
    (0..steps)
        .map(|i| range.0 + (range.1 - range.0) * i as f64 / (steps - 1) as f64)
        .collect()
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: (f64, f64)| r.0 > 0.0 && r.1 >= r.0 && r.1.is_finite();
        if !ok(self.sigma_c2) || !ok(self.sigma_eps2) {
            return Err(Error::Validation("grid bounds must be positive and ordered".into()));
        }
        if self.steps_c == 0 || self.steps_eps == 0 {
            return Err(Error::Validation("grid needs at least one step per axis".into()));
        }
        Ok(())
    }

    /// Grid points, `sigma_eps^2` varying fastest.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let cs = axis(self.sigma_c2, self.steps_c);
        let es = axis(self.sigma_eps2, self.steps_eps);
        cs.iter()
            .flat_map(|&c| es.iter().map(move |&e| (c, e)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub sigma_c2: f64,
    pub sigma_eps2: f64,
    /// Index into [`SensitivityMap::designs`]; `None` when no design is admissible.
    pub design_id: Option<usize>,
    pub criterion_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub points: Vec<SensitivityPoint>,
    /// Distinct optimal designs in order of first appearance.
    pub designs: Vec<Design>,
}

impl SensitivityMap {
    /// CSV with header `sigma_c2,sigma_eps2,rho,design_id,criterion_value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma_c2,sigma_eps2,rho,design_id,criterion_value\n");
        for p in &self.points {
            let rho = p.sigma_c2 / (p.sigma_c2 + p.sigma_eps2);
            let id = p.design_id.map(|i| i.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{:e}", p.sigma_c2, p.sigma_eps2, rho, id, p.criterion_value);
        }
        out
    }

    /// Criterion of `design` at every grid point divided by the point's optimum.
    pub fn variance_ratios(&self, design: &Design, objective: &Objective) -> Result<Vec<RatioPoint>> {
        self.points
            .iter()
            .map(|p| {
                let vc = VarianceComponents::new(p.sigma_c2, 0.0, 0.0, p.sigma_eps2)?;
                let v = criterion_value(&treatment_covariance(design, &vc)?, objective.criterion)?;
                Ok(RatioPoint {
                    sigma_c2: p.sigma_c2,
                    sigma_eps2: p.sigma_eps2,
                    ratio: v / p.criterion_value,
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub sigma_c2: f64,
    pub sigma_eps2: f64,
    pub ratio: f64,
}

/// Runs the search at every grid point (`sigma_theta^2 = sigma_s^2 = 0`) and
/// interns the winning canonical designs.
pub fn sensitivity_map(
    grid: &GridSpec,
    space: &DesignSpace,
    objective: &Objective,
    spec: &PowerSpec,
    options: &SearchOptions,
) -> Result<SensitivityMap> {
    grid.validate()?;
    let prepared = PreparedSpace::new(space, options.candidate_cap)?;
    let mut ids: HashMap<(usize, Vec<Sequence>), usize> = HashMap::new();
    let mut designs = Vec::new();
    let mut points = Vec::new();
    let quiet = SearchOptions {
        progress: None,
        ..options.clone()
    };
    for (c, e) in grid.points() {
        let vc = VarianceComponents::new(c, 0.0, 0.0, e)?;
        let outcome = prepared.search(&vc, spec, objective, &quiet)?;
        let (design_id, value) = match outcome {
            SearchOutcome::Admissible(r) => {
                let key = (r.best.m(), r.best.allocation().to_vec());
                let next = designs.len();
                let id = *ids.entry(key).or_insert(next);
                if id == next {
                    designs.push(r.best.clone());
                }
                (Some(id), r.criterion_value)
            }
            SearchOutcome::NoAdmissibleDesign { suggestion } => (None, suggestion.criterion_value),
        };
        points.push(SensitivityPoint {
            sigma_c2: c,
            sigma_eps2: e,
            design_id,
            criterion_value: value,
        });
    }
    Ok(SensitivityMap { points, designs })
}

/// Ratio of the criterion of `design` to that of the grid-point optimum, at
/// every grid point. For one treatment effect this is the variance ratio of
/// its estimator.
pub fn variance_ratio_map(
    design: &Design,
    grid: &GridSpec,
    space: &DesignSpace,
    objective: &Objective,
    spec: &PowerSpec,
    options: &SearchOptions,
) -> Result<Vec<RatioPoint>> {
    sensitivity_map(grid, space, objective, spec, options)?.variance_ratios(design, objective)
}
