//! Time-constant hazards over correlated normals, with a logistic model that is
//! either well specified or misspecified for them.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{sample_covariates, sample_observed, OracleTruth};
use crate::error::{Error, Result};
use crate::survdata::{Cohort, HazardSurface, ShortRecord, TimeGrid};
use crate::{seeded_rng, sigmoid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyVariant {
    /// `sigmoid(x_1 - 0.25)`
    WellSpecified,
    /// `sigmoid(1{x_1 > 0} x_1 - 0.25)`
    Misspecified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub variant: ToyVariant,
    pub d: usize,
    pub rho: f64,
    pub n: usize,
    pub t_max: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            variant: ToyVariant::WellSpecified,
            d: 5,
            rho: 0.2,
            n: 20_000,
            t_max: 20,
            seed: 0,
        }
    }
}

pub fn toy_hazard(x: &[f64], variant: ToyVariant) -> f64 {
    match variant {
        ToyVariant::WellSpecified => sigmoid(x[0] - 0.25),
        ToyVariant::Misspecified => sigmoid(if x[0] > 0.0 { x[0] } else { 0.0 } - 0.25),
    }
}

/// Single-arm cohort; the oracle carries the same hazard in both arm slots.
pub fn toy_generate(cfg: &ToyConfig) -> Result<(Cohort, OracleTruth)> {
    if cfg.d == 0 || cfg.t_max == 0 {
        return Err(Error::InvalidConfig("toy config needs d >= 1 and t_max >= 1".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let x = sample_covariates(cfg.n, cfg.d, cfg.rho, &mut rng)?;
    let grid = TimeGrid::uniform(1.0, cfg.t_max)?;
    let mut hazard = HazardSurface::zeros(cfg.n, grid.clone());
    let mut censor = Array2::zeros((cfg.n, cfg.t_max));
    let mut records = Vec::with_capacity(cfg.n);
    for (i, row) in x.rows().into_iter().enumerate() {
        let xi = row.as_slice().expect("row-major");
        let h = toy_hazard(xi, cfg.variant);
        let (tau_tilde, delta) = sample_observed(|_| h, |_| 0.0, cfg.t_max, &mut rng);
        records.push(ShortRecord {
            x: xi.to_vec(),
            a: 0,
            tau_tilde,
            delta,
        });
        for t in 1..=cfg.t_max {
            hazard.set(i, 0, t, h);
            hazard.set(i, 1, t, h);
        }
        censor[[i, cfg.t_max - 1]] = 1.0;
    }
    let cohort = Cohort::new(records, grid)?;
    let oracle = OracleTruth::from_hazards(hazard, censor, vec![0.0; cfg.n], &[])?;
    Ok((cohort, oracle))
}
