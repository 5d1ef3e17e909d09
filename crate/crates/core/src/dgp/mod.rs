//! Data-generating processes with exact ground truth.
//!
//! The synthetic scenarios share one event process and isolate the three
//! sources of covariate shift:
//!
//! | scenario | treatment selection | informative censoring |
//! |----------|---------------------|-----------------------|
//! | S1       | no                  | no                    |
//! | S2       | no                  | yes                   |
//! | S3       | yes                 | no                    |
//! | S4       | yes                 | yes                   |
//!
//! Event-induced shift is present everywhere. All scenarios are
//! administratively censored at `t_max`.

mod toy;
mod twins;

pub use toy::{toy_generate, toy_hazard, ToyConfig, ToyVariant};
pub use twins::{
    paired_hte_rmst, semi_synthetic_transform, synthetic_paired_outcomes, PairedOutcomeTable,
    SemiSyntheticConfig, SemiSyntheticResult,
};

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::survdata::{Cohort, HazardSurface, ShortRecord, SurvivalSurface, TimeGrid};
use crate::{seeded_rng, sigmoid, Rng};

/// Horizon of the synthetic event process.
pub const SYNTHETIC_T_MAX: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
}

impl Scenario {
    pub fn has_treatment(self) -> bool {
        matches!(self, Scenario::S3 | Scenario::S4)
    }

    pub fn has_censoring(self) -> bool {
        matches!(self, Scenario::S2 | Scenario::S4)
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            "S4" => Ok(Scenario::S4),
            other => Err(Error::InvalidConfig(format!("unknown scenario {other:?}"))),
        }
    }
}

/// How the selection strength enters the treatment assignment probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    /// `sigmoid(zeta * sum_p x_p)`
    #[default]
    Logistic,
    /// `min(1, zeta * sigmoid(sum_p x_p))`
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub scenario: Scenario,
    pub zeta: f64,
    /// 1-based covariate indices driving treatment selection.
    pub selection_set: Vec<usize>,
    pub rho: f64,
    pub d: usize,
    pub n: usize,
    pub t_max: usize,
    pub seed: u64,
    pub propensity_mode: PropensityMode,
    /// Horizons `L` at which the oracle RMST difference is tabulated.
    pub rmst_horizons: Vec<f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::new(Scenario::S3)
    }
}

impl SyntheticConfig {
    /// Defaults for a scenario: strong selection on non-outcome covariates where treatment exists.
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            zeta: if scenario.has_treatment() { 3.0 } else { 0.0 },
            selection_set: vec![9, 10],
            rho: 0.2,
            d: 10,
            n: 5000,
            t_max: SYNTHETIC_T_MAX,
            seed: 0,
            propensity_mode: PropensityMode::Logistic,
            rmst_horizons: vec![10.0, 20.0],
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if self.d < 4 {
            return Err(Error::InvalidConfig("the event process needs d >= 4".into()));
        }
        if self.t_max == 0 || self.t_max > SYNTHETIC_T_MAX {
            return Err(Error::InvalidConfig(format!(
                "t_max must lie in 1..={SYNTHETIC_T_MAX}"
            )));
        }
        if self.zeta < 0.0 || !self.zeta.is_finite() {
            return Err(Error::InvalidConfig("zeta must be finite and >= 0".into()));
        }
        if self.selection_set.iter().any(|&p| p == 0 || p > self.d) {
            return Err(Error::InvalidConfig(format!(
                "selection set {:?} not within 1..={}",
                self.selection_set, self.d
            )));
        }
        if !self.scenario.has_treatment() && self.zeta != 0.0 {
            return Err(Error::InvalidConfig(
                "single-arm scenarios (S1/S2) require zeta = 0".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::uniform(1.0, self.t_max).expect("t_max validated")
    }

    /// Censoring hazard including scenario gating and administrative censoring at `t_max`.
    pub fn censor_hazard(&self, x: &[f64], t: usize) -> f64 {
        if t >= self.t_max {
            1.0
        } else if self.scenario.has_censoring() {
            0.01 * sigmoid(10.0 * x[3] * x[3])
        } else {
            0.0
        }
    }
}

/// Draws `n` rows from `N(0, (1 - rho) I + rho 11^T)` via the Cholesky factor.
pub fn sample_covariates(n: usize, d: usize, rho: f64, rng: &mut Rng) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("rho must lie in [0, 1), got {rho}")));
    }
    let sigma = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho });
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut out = Array2::zeros((n, d));
    let mut z = vec![0.0; d];
    for mut row in out.rows_mut() {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        for i in 0..d {
            row[i] = (0..=i).map(|j| l[(i, j)] * z[j]).sum();
        }
    }
    Ok(out)
}

/// Covariate matrix of the cohort that [`generate`] produces for the same config.
pub fn gen_covariates(cfg: &SyntheticConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    sample_covariates(cfg.n, cfg.d, cfg.rho, &mut rng)
}

fn check_bin(t: usize) -> Result<()> {
    if t == 0 || t > SYNTHETIC_T_MAX {
        return Err(invalid(format!("bin {t} outside 1..={SYNTHETIC_T_MAX}")));
    }
    Ok(())
}

/// Treatment-specific event hazard `lambda^a(t | x)`.
pub fn event_hazard(x: &[f64], a: u8, t: usize) -> Result<f64> {
    check_bin(t)?;
    Ok(event_hazard_unchecked(x, a, t))
}

fn event_hazard_unchecked(x: &[f64], a: u8, t: usize) -> f64 {
    let effect = f64::from(a) * (if x[2] >= 0.0 { 1.0 } else { 0.0 } + 0.5);
    if t <= 10 {
        0.1 * sigmoid(-5.0 * x[0] * x[0] - effect)
    } else {
        0.1 * sigmoid(10.0 * x[1] - effect)
    }
}

/// Informative censoring hazard with administrative censoring at bin 30.
pub fn censor_hazard(x: &[f64], t: usize) -> Result<f64> {
    check_bin(t)?;
    Ok(if t == SYNTHETIC_T_MAX {
        1.0
    } else {
        0.01 * sigmoid(10.0 * x[3] * x[3])
    })
}

/// Probability of receiving treatment, `e_1(x)`.
pub fn propensity(x: &[f64], cfg: &SyntheticConfig) -> f64 {
    if !cfg.scenario.has_treatment() || cfg.zeta == 0.0 {
        return 0.0;
    }
    let s: f64 = cfg.selection_set.iter().map(|&p| x[p - 1]).sum();
    match cfg.propensity_mode {
        PropensityMode::Logistic => sigmoid(cfg.zeta * s),
        PropensityMode::Literal => (cfg.zeta * sigmoid(s)).min(1.0),
    }
}

/// First bin at which an independent Bernoulli(hazard(t)) fires, if any.
fn first_firing(hazard: impl Fn(usize) -> f64, t_max: usize, rng: &mut Rng) -> Option<usize> {
    (1..=t_max).find(|&t| rng.random::<f64>() < hazard(t))
}

/// Samples `(tau_tilde, delta)` from arbitrary event and censoring hazards.
///
/// Event and censoring times are drawn independently; the event wins ties.
/// When neither fires the subject is censored at `t_max`.
pub fn sample_observed(
    event: impl Fn(usize) -> f64,
    censor: impl Fn(usize) -> f64,
    t_max: usize,
    rng: &mut Rng,
) -> (usize, bool) {
    let t_event = first_firing(event, t_max, rng);
    let t_censor = first_firing(censor, t_max, rng);
    match (t_event, t_censor) {
        (Some(te), Some(tc)) if te <= tc => (te, true),
        (Some(te), None) => (te, true),
        (_, Some(tc)) => (tc, false),
        (None, None) => (t_max, false),
    }
}

pub fn sample_times(x: &[f64], a: u8, cfg: &SyntheticConfig, rng: &mut Rng) -> (usize, bool) {
    sample_observed(
        |t| event_hazard_unchecked(x, a, t),
        |t| cfg.censor_hazard(x, t),
        cfg.t_max,
        rng,
    )
}

/// RMST differences for one horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonValues {
    pub horizon: f64,
    pub values: Vec<f64>,
}

/// Closed-form ground truth for every subject of a generated cohort.
#[derive(Clone, Debug)]
pub struct OracleTruth {
    pub event_hazard: HazardSurface,
    /// `(subject, t - 1)`
    pub censor_hazard: Array2<f64>,
    pub survival: SurvivalSurface,
    /// `e_1(x_i)`; zero in single-arm cohorts.
    pub propensity: Vec<f64>,
    /// `(subject, t - 1)`
    pub hte_surv: Array2<f64>,
    pub hte_rmst: Vec<HorizonValues>,
}

impl OracleTruth {
    pub fn from_hazards(
        event_hazard: HazardSurface,
        censor_hazard: Array2<f64>,
        propensity: Vec<f64>,
        horizons: &[f64],
    ) -> Result<Self> {
        let survival = event_hazard.to_survival()?;
        let hte_surv = survival.hte_surv();
        let hte_rmst = horizons
            .iter()
            .map(|&h| {
                Ok(HorizonValues {
                    horizon: h,
                    values: survival.hte_rmst(h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            event_hazard,
            censor_hazard,
            survival,
            propensity,
            hte_surv,
            hte_rmst,
        })
    }

    /// Oracle RMST difference at `horizon`, computed on demand if not tabulated.
    pub fn hte_rmst_at(&self, horizon: f64) -> Result<Vec<f64>> {
        match self.hte_rmst.iter().find(|h| h.horizon == horizon) {
            Some(h) => Ok(h.values.clone()),
            None => self.survival.hte_rmst(horizon),
        }
    }

    /// Probability of still being at risk after bin `t` in arm `a`:
    /// `prod_{s <= t} (1 - lambda^a(s|x)) (1 - lambda_C(s|x))`.
    pub fn at_risk_probability(&self, subject: usize, a: u8, t: usize) -> f64 {
        (1..=t)
            .map(|s| {
                (1.0 - self.event_hazard.get(subject, a, s))
                    * (1.0 - self.censor_hazard[[subject, s - 1]])
            })
            .product()
    }

    /// Overlap diagnostics for treatment assignment, censoring and survival.
    pub fn positivity(&self, two_arm: bool) -> PositivityReport {
        let n = self.propensity.len();
        let t_max = self.event_hazard.grid.t_max();
        let (min_p, max_p) = self
            .propensity
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            });
        let arms: &[u8] = if two_arm { &[0, 1] } else { &[0] };
        let mut min_risk = f64::INFINITY;
        for i in 0..n {
            for &a in arms {
                if t_max > 1 {
                    min_risk = min_risk.min(self.at_risk_probability(i, a, t_max - 1));
                }
            }
        }
        PositivityReport {
            min_propensity: min_p,
            max_propensity: max_p,
            min_at_risk_probability: min_risk,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub min_propensity: f64,
    pub max_propensity: f64,
    /// Minimum over subjects, arms and `t <= t_max - 1`.
    pub min_at_risk_probability: f64,
}

/// Samples a synthetic cohort and its closed-form oracle.
pub fn generate(cfg: &SyntheticConfig) -> Result<(Cohort, OracleTruth)> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let x = sample_covariates(cfg.n, cfg.d, cfg.rho, &mut rng)?;
    let grid = cfg.grid();

    let props: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|row| propensity(row.as_slice().expect("row-major"), cfg))
        .collect();
    let treatments: Vec<u8> = props
        .iter()
        .map(|&p| u8::from(p > 0.0 && rng.random::<f64>() < p))
        .collect();

    let mut records = Vec::with_capacity(cfg.n);
    let mut hazard = HazardSurface::zeros(cfg.n, grid.clone());
    let mut censor = Array2::zeros((cfg.n, cfg.t_max));
    for (i, row) in x.rows().into_iter().enumerate() {
        let xi = row.as_slice().expect("row-major");
        let a = treatments[i];
        let (tau_tilde, delta) = sample_times(xi, a, cfg, &mut rng);
        records.push(ShortRecord {
            x: xi.to_vec(),
            a,
            tau_tilde,
            delta,
        });
        for t in 1..=cfg.t_max {
            for arm in 0..2u8 {
                hazard.set(i, arm, t, event_hazard_unchecked(xi, arm, t));
            }
            censor[[i, t - 1]] = cfg.censor_hazard(xi, t);
        }
    }
    let cohort = Cohort::new(records, grid)?;
    let oracle = OracleTruth::from_hazards(hazard, censor, props, &cfg.rmst_horizons)?;
    Ok((cohort, oracle))
}

/// Optimal importance weights `w*_{a,t}(x) = p_{t,a} / (e_a(x) r^a(x, t))` for every row of `x`.
///
/// `r^a(x, t)` is the oracle probability of being at risk at `t` and `p_{t,a}`
/// is estimated by averaging `e_a(x) r^a(x, t)` over the rows. Diagnostic only.
pub fn oracle_weights(x: &Array2<f64>, t: usize, a: u8, cfg: &SyntheticConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if t == 0 || t > cfg.t_max {
        return Err(invalid(format!("bin {t} outside 1..={}", cfg.t_max)));
    }
    let two_arm = cfg.scenario.has_treatment() && cfg.zeta > 0.0;
    if !two_arm && a == 1 {
        return Err(Error::PositivityViolation(
            "arm 1 is never assigned in a single-arm scenario".into(),
        ));
    }
    let mut mass = Vec::with_capacity(x.nrows());
    for row in x.rows() {
        let xi = row.as_slice().expect("row-major");
        let e_a = if two_arm {
            let e1 = propensity(xi, cfg);
            if a == 1 { e1 } else { 1.0 - e1 }
        } else {
            1.0
        };
        if e_a <= 0.0 {
            return Err(Error::PositivityViolation(format!(
                "propensity of arm {a} is zero at x = {xi:?}"
            )));
        }
        let r: f64 = (1..t)
            .map(|s| (1.0 - event_hazard_unchecked(xi, a, s)) * (1.0 - cfg.censor_hazard(xi, s)))
            .product();
        mass.push(e_a * r);
    }
    let p = mass.iter().sum::<f64>() / mass.len() as f64;
    Ok(mass.into_iter().map(|m| p / m).collect())
}
