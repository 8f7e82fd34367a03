//! Exact check of the additive error bound on random finite-state models.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentKind, Outputs, RunRecord};
use crate::discrete::{
    fitted_slope, growth_sweep, random_hmm, verify_instance, GridSpec, GrowthPoint, VerifierRow,
    BOUND_SLACK,
};
use crate::error::{Error, Result};

/// Error along prefixes of one long sequence with a fixed perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowthConfig {
    pub enabled: bool,
    pub states: usize,
    pub n_obs: usize,
    pub horizons: Vec<usize>,
    pub kappa: f64,
    /// Step carrying the single nonzero term of the marginal functional.
    pub marginal_step: usize,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig {
            enabled: true,
            states: 3,
            n_obs: 3,
            horizons: (1..=20).map(|i| i * 10).collect(),
            kappa: 50.0,
            marginal_step: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConfig {
    pub grid: GridSpec,
    pub growth: GrowthConfig,
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let g = &self.growth;
        if g.enabled {
            if g.states < 2 || g.n_obs < 1 || g.horizons.is_empty() || !(g.kappa > 0.0) {
                return Err(Error::InvalidConfig(
                    "growth sweep needs states >= 2, horizons and kappa > 0".into(),
                ));
            }
            if g.horizons.iter().any(|&n| n <= g.marginal_step) {
                return Err(Error::InvalidConfig(
                    "every horizon must exceed the marginal step".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BoundResults {
    pub rows: Vec<VerifierRow>,
    pub growth: Vec<GrowthPoint>,
}

impl BoundResults {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| !r.holds).count()
            + self
                .growth
                .iter()
                .filter(|p| {
                    p.lhs > p.rhs + BOUND_SLACK || p.marginal_lhs > p.marginal_bound + BOUND_SLACK
                })
                .count()
    }

    /// `(lhs slope, rhs slope)` of a least-squares line through the sweep.
    pub fn growth_slopes(&self) -> Option<(f64, f64)> {
        if self.growth.len() < 2 {
            return None;
        }
        let x: Vec<f64> = self.growth.iter().map(|p| p.n as f64).collect();
        let lhs: Vec<f64> = self.growth.iter().map(|p| p.lhs).collect();
        let rhs: Vec<f64> = self.growth.iter().map(|p| p.rhs).collect();
        Some((fitted_slope(&x, &lhs), fitted_slope(&x, &rhs)))
    }
}

/// Stream of the growth sweep's model, disjoint from instance ids.
const GROWTH_STREAM: u64 = 0x6E0;

pub fn bound_experiment(cfg: &BoundConfig, seed: u64) -> Result<BoundResults> {
    cfg.validate()?;
    let specs = cfg.grid.instances(seed)?;
    let rows = specs
        .par_iter()
        .enumerate()
        .map(|(id, spec)| verify_instance(id, spec, seed))
        .collect::<Result<Vec<_>>>()?;
    let growth = if cfg.growth.enabled {
        let g = &cfg.growth;
        let max_n = *g.horizons.iter().max().expect("validated nonempty");
        let hmm = random_hmm(g.states, g.n_obs, max_n, seed, GROWTH_STREAM)?;
        growth_sweep(&hmm.model, g.kappa, &g.horizons, g.marginal_step, seed)?
    } else {
        Vec::new()
    };
    Ok(BoundResults { rows, growth })
}

/// Writes `verifier.csv` (and `growth.csv`) plus the manifest, then fails
/// with [`Error::BoundViolation`] if any instance breaks the bound.
pub fn run_bound_verify(config: &ExperimentConfig) -> Result<RunRecord> {
    config.expect_kind(ExperimentKind::BoundVerify)?;
    let res = bound_experiment(&config.bound_verify, config.seed)?;
    let mut out = Outputs::create(&config.output_dir()?)?;
    out.write_csv("verifier.csv", &res.rows)?;
    if !res.growth.is_empty() {
        out.write_csv("growth.csv", &res.growth)?;
    }
    let mut errors = BTreeMap::new();
    errors.insert("lhs".to_string(), res.rows.iter().map(|r| r.lhs).collect());
    errors.insert("rhs".to_string(), res.rows.iter().map(|r| r.rhs).collect());
    if !res.growth.is_empty() {
        errors.insert(
            "growth_lhs".to_string(),
            res.growth.iter().map(|p| p.lhs).collect(),
        );
        errors.insert(
            "growth_marginal_lhs".to_string(),
            res.growth.iter().map(|p| p.marginal_lhs).collect(),
        );
    }
    let record = out.finish(ExperimentKind::BoundVerify, config, BTreeMap::new(), errors)?;
    match res.violations() {
        0 => Ok(record),
        violations => Err(Error::BoundViolation {
            violations,
            instances: res.rows.len() + res.growth.len(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_grid_holds() {
        let cfg = BoundConfig {
            grid: GridSpec {
                instances: 12,
                max_n: 8,
                ..GridSpec::default()
            },
            growth: GrowthConfig {
                horizons: vec![10, 20, 40],
                ..GrowthConfig::default()
            },
        };
        let res = bound_experiment(&cfg, 3).unwrap();
        assert_eq!(res.rows.len(), 12);
        assert_eq!(res.violations(), 0);
        let (lhs, rhs) = res.growth_slopes().unwrap();
        assert!(lhs <= rhs);
    }

    #[test]
    fn rejects_bad_growth() {
        let mut cfg = BoundConfig::default();
        cfg.growth.horizons = vec![3];
        assert!(cfg.validate().is_err());
        let json = serde_json::to_string(&BoundConfig::default()).unwrap();
        assert_eq!(
            serde_json::from_str::<BoundConfig>(&json).unwrap(),
            BoundConfig::default()
        );
    }
}
