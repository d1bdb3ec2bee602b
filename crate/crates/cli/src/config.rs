//! Run configuration files.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use sw_design::analytic::rho_from_e;
use sw_design::search::{CEParams, GridSpec, DEFAULT_CANDIDATE_CAP};
use sw_design::{DesignSpace, Objective, PowerSpec, Restriction, VarianceComponents};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Evaluate,
    Search,
    CeSearch,
    Sensitivity,
    Analytic,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Evaluate => "evaluate",
            Mode::Search => "search",
            Mode::CeSearch => "ce-search",
            Mode::Sensitivity => "sensitivity",
            Mode::Analytic => "analytic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<SpaceBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<PowerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<Objective>,
    /// Design to evaluate; `X` may come from `--design` instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignBlock>,
    /// Reference design for percentage changes; `X` may come from `--compare`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparator: Option<DesignBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce: Option<CeBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analytic: Option<AnalyticBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_cap: Option<u128>,
}

/// Variance components in one of four spellings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelBlock {
    Components(ComponentsBlock),
    Correlations(CorrelationsBlock),
    CrossSectional(CrossSectionalBlock),
    ClusterMean(ClusterMeanBlock),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentsBlock {
    pub sigma2_c: f64,
    #[serde(default)]
    pub sigma2_theta: f64,
    #[serde(default)]
    pub sigma2_s: f64,
    pub sigma2_eps: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationsBlock {
    #[serde(default = "one")]
    pub sigma2: f64,
    pub rho0: f64,
    pub rho1: f64,
    pub rho2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossSectionalBlock {
    #[serde(default = "one")]
    pub sigma2: f64,
    pub rho: f64,
}

/// Cross-sectional model given through `E(rho)`; needs a single `m` and `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterMeanBlock {
    #[serde(default = "one")]
    pub sigma2: f64,
    #[serde(rename = "E")]
    pub e: f64,
}

impl ModelBlock {
    /// Variance components; `m_t` supplies `(m, T)` for the `E(rho)` spelling.
    pub fn components(&self, m_t: impl FnOnce() -> Result<(usize, usize)>) -> Result<VarianceComponents> {
        Ok(match self {
            ModelBlock::Components(b) => VarianceComponents::new(b.sigma2_c, b.sigma2_theta, b.sigma2_s, b.sigma2_eps)?,
            ModelBlock::Correlations(b) => VarianceComponents::from_correlations(b.sigma2, b.rho0, b.rho1, b.rho2)?,
            ModelBlock::CrossSectional(b) => VarianceComponents::cross_sectional(b.sigma2, b.rho)?,
            ModelBlock::ClusterMean(b) => {
                let (m, t) = m_t().context("model given as E needs a single m and T")?;
                VarianceComponents::cross_sectional(b.sigma2, rho_from_e(m, t, b.e)?)?
            }
        })
    }
}

/// Either one list for every key or an explicit map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerPeriod {
    Same(Vec<usize>),
    ByPeriods(BTreeMap<String, Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasurementRule {
    List(Vec<usize>),
    /// `min..=max`, further capped at `floor(max_observations_per_cluster / T)`.
    Range {
        min: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_observations_per_cluster: Option<usize>,
    },
}

fn default_restrictions() -> Vec<Restriction> {
    vec![Restriction::MonotoneNondecreasing, Restriction::Identifiable]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceBlock {
    #[serde(rename = "D")]
    pub arms: usize,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub periods: Option<Vec<usize>>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<PerPeriod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<MeasurementRule>,
    #[serde(default = "default_restrictions")]
    pub restrictions: Vec<Restriction>,
}

impl SpaceBlock {
    pub fn build(&self) -> Result<DesignSpace> {
        let periods = self.periods.clone().context("space block needs T")?;
        let clusters = self.clusters.clone().context("space block needs C")?;
        let rule = self.m.clone().context("space block needs m")?;
        if let PerPeriod::ByPeriods(map) = &clusters {
            for key in map.keys() {
                let t: usize = key.parse().with_context(|| format!("C key {key:?} is not a period count"))?;
                ensure!(periods.contains(&t), "C is given for T = {t}, which is not in T");
            }
        }
        let clusters_for = |t: usize| match &clusters {
            PerPeriod::Same(v) => v.clone(),
            PerPeriod::ByPeriods(map) => map.get(&t.to_string()).cloned().unwrap_or_default(),
        };
        let measurements_for = |_c: usize, t: usize| match &rule {
            MeasurementRule::List(v) => v.clone(),
            MeasurementRule::Range {
                min,
                max,
                max_observations_per_cluster,
            } => {
                let cap = max_observations_per_cluster.map_or(usize::MAX, |n| n / t);
                let hi = max.unwrap_or(usize::MAX).min(cap);
                if hi == usize::MAX {
                    Vec::new()
                } else {
                    (*min..=hi).collect()
                }
            }
        };
        if let MeasurementRule::Range {
            max: None,
            max_observations_per_cluster: None,
            ..
        } = rule
        {
            bail!("m range needs max or max_observations_per_cluster");
        }
        Ok(DesignSpace::from_rules(
            self.arms,
            periods,
            clusters_for,
            measurements_for,
            self.restrictions.clone(),
        )?)
    }

    /// `(m, T)` when the space admits exactly one of each.
    pub fn single_m_t(&self) -> Result<(usize, usize)> {
        let space = self.build()?;
        let ts: Vec<usize> = space.periods().collect();
        ensure!(ts.len() == 1, "space has {} period counts", ts.len());
        let t = ts[0];
        let mut ms = std::collections::BTreeSet::new();
        for c in space.clusters(t) {
            ms.extend(space.measurements(c, t));
        }
        ensure!(ms.len() == 1, "space has {} values of m", ms.len());
        Ok((*ms.iter().next().unwrap(), t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignBlock {
    pub m: usize,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub arms: Option<usize>,
    #[serde(rename = "X", default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<Vec<Vec<u8>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeBlock {
    #[serde(rename = "C")]
    pub clusters: usize,
    #[serde(rename = "T")]
    pub periods: usize,
    pub m: usize,
    #[serde(flatten)]
    pub params: CEParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBlock {
    #[serde(flatten)]
    pub grid: GridSpec,
    /// Designs whose criterion ratio to the grid optimum is mapped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ratio_designs: Vec<NamedDesign>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedDesign {
    pub name: String,
    #[serde(rename = "X")]
    pub allocation: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSetting {
    pub rho0: f64,
    pub rho1: f64,
    pub rho2: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub periods: Option<usize>,
    /// Cluster mean correlations to convert to `rho` and sequence counts.
    #[serde(rename = "E", default, skip_serializing_if = "Vec::is_empty")]
    pub e: Vec<f64>,
    /// Intra-cluster correlations to convert to `E(rho)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rho: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cohort: Vec<CohortSetting>,
    /// Mean responses of binary outcomes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub p_bar: Vec<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("cannot parse config {}", path.display()))?;
        ensure!(
            config.schema_version == SCHEMA_VERSION,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            config.schema_version
        );
        Ok(config)
    }

    pub fn candidate_cap(&self) -> u128 {
        self.candidate_cap.unwrap_or(DEFAULT_CANDIDATE_CAP)
    }

    pub fn space_block(&self) -> Result<&SpaceBlock> {
        self.space.as_ref().context("config has no space block")
    }

    pub fn objective(&self) -> Result<&Objective> {
        self.objective.as_ref().context("config has no objective block")
    }

    /// Variance components, taking `(m, T)` for the `E(rho)` spelling from
    /// `fallback` or else from the space.
    pub fn components(&self, fallback: Option<(usize, usize)>) -> Result<VarianceComponents> {
        let model = self.model.as_ref().context("config has no model block")?;
        model.components(|| match fallback {
            Some(mt) => Ok(mt),
            None => self.space_block()?.single_m_t(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_spellings() {
        let m: ModelBlock = serde_json::from_str(r#"{"sigma2": 1, "rho": 0.05}"#).unwrap();
        let vc = m.components(|| unreachable!()).unwrap();
        assert!((vc.sigma2_c - 0.05).abs() < 1e-15 && (vc.sigma2_eps - 0.95).abs() < 1e-15);
        assert_eq!(vc.sigma2_theta, 0.0);
        let m: ModelBlock = serde_json::from_str(r#"{"rho0": 0.05, "rho1": 0.001, "rho2": 0.25}"#).unwrap();
        assert!(matches!(m, ModelBlock::Correlations(_)));
        let m: ModelBlock = serde_json::from_str(r#"{"sigma2_c": 0.1, "sigma2_eps": 0.9}"#).unwrap();
        assert!(matches!(m, ModelBlock::Components(_)));
        let m: ModelBlock = serde_json::from_str(r#"{"E": 0.45}"#).unwrap();
        let vc = m.components(|| Ok((10, 6))).unwrap();
        assert!((vc.sigma2_c - rho_from_e(10, 6, 0.45).unwrap()).abs() < 1e-15);
        assert!(serde_json::from_str::<ModelBlock>(r#"{"sigma2": 1, "rho": 0.1, "extra": 2}"#).is_err());
    }

    #[test]
    fn space_with_observation_cap() {
        let s: SpaceBlock = serde_json::from_str(
            r#"{"D": 3, "T": [2, 6], "C": [2, 6], "m": {"min": 2, "max_observations_per_cluster": 48}}"#,
        )
        .unwrap();
        let space = s.build().unwrap();
        assert_eq!(space.measurements(6, 6).collect::<Vec<_>>(), (2..=8).collect::<Vec<_>>());
        assert_eq!(space.measurements(2, 2).max(), Some(24));
        assert_eq!(space.restrictions(), default_restrictions().as_slice());
    }

    #[test]
    fn clusters_per_period() {
        let s: SpaceBlock =
            serde_json::from_str(r#"{"D": 2, "T": [3, 4], "C": {"3": [2], "4": [3, 4]}, "m": [5]}"#).unwrap();
        let space = s.build().unwrap();
        assert_eq!(space.clusters(4).collect::<Vec<_>>(), vec![3, 4]);
        let bad: SpaceBlock = serde_json::from_str(r#"{"D": 2, "T": [3], "C": {"5": [2]}, "m": [5]}"#).unwrap();
        assert!(bad.build().is_err());
    }
}
