//! Treatment-specific hazard networks on a shared balanced representation.
//!
//! A representation network `phi` maps covariates to `R` dimensions; one
//! sigmoid head per `(arm, t)` turns the representation into a discrete
//! hazard. Training minimises the at-risk log-loss, optionally plus an
//! entropic Wasserstein penalty between the baseline batch and each at-risk
//! set, and a penalty on the difference between consecutive heads.

mod loss;
mod train;

pub use loss::{
    ipm_loss, ipm_on_representation, long_format_log_loss, risk_loss, risk_loss_with,
    short_format_nll, smoothing_loss, IpmValue,
};
pub use train::{
    choose_beta, select_beta, select_beta_with, sweep_beta_with, train, train_with, BetaReport, BetaRun,
    BetaSelection,
    EpochRecord, NoopObserver, TrainObserver, TrainedModel,
};

use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dgp::HorizonValues;
use crate::diffnet::{Activation, Mlp, PROB_CLAMP};
use crate::error::{Error, Result};
use crate::ipm::SinkhornConfig;
use crate::survdata::{HazardSurface, SurvivalSurface, TimeGrid};
use crate::Rng;

/// Default candidate grid for the balancing coefficient.
pub const BETA_GRID: [f64; 5] = [1.0, 0.1, 0.01, 0.001, 0.0001];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalancingMode {
    #[default]
    None,
    /// Baseline batch against every at-risk set `{tau >= t, a}`.
    Survite,
    /// Treated against control at baseline.
    Cfr1,
    /// Treated against control within every at-risk set.
    Cfr2,
}

impl std::str::FromStr for BalancingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "survite" => Ok(Self::Survite),
            "cfr1" | "cfr-1" => Ok(Self::Cfr1),
            "cfr2" | "cfr-2" => Ok(Self::Cfr2),
            other => Err(Error::InvalidConfig(format!("unknown balancing mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    /// Widths of the representation layers; the last one is `R`.
    pub phi_widths: Vec<usize>,
    /// Hidden widths of every head.
    pub head_widths: Vec<usize>,
    pub activation: Activation,
    /// One head per arm fed `(phi(x), t / t_max)` instead of one head per `(arm, t)`.
    pub shared_heads: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            phi_widths: vec![100, 100, 100],
            head_widths: vec![100, 100],
            activation: Activation::Relu,
            shared_heads: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub balancing_mode: BalancingMode,
    pub smoothing_coeff: f64,
    /// Fit arm 0 only (no treatment effect heads).
    pub single_arm: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub architecture: Architecture,
    pub sinkhorn: SinkhornConfig,
    pub beta_candidates: Vec<f64>,
    /// C-index slack tolerated when preferring a larger beta.
    pub beta_tolerance: f64,
    /// Time bin for the validation C-index; `None` means `t_max`.
    pub eval_time: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.0,
            balancing_mode: BalancingMode::None,
            smoothing_coeff: 0.0,
            single_arm: false,
            epochs: 200,
            batch_size: 256,
            lr: 1e-3,
            dropout: 0.3,
            seed: 0,
            val_fraction: 0.2,
            patience: 20,
            architecture: Architecture::default(),
            sinkhorn: SinkhornConfig::default(),
            beta_candidates: BETA_GRID.to_vec(),
            beta_tolerance: 0.01,
            eval_time: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.smoothing_coeff >= 0.0 && self.smoothing_coeff.is_finite()) {
            return bad(format!("smoothing_coeff must be >= 0, got {}", self.smoothing_coeff));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if self.architecture.phi_widths.is_empty() || self.architecture.phi_widths.contains(&0) {
            return bad("phi_widths must be non-empty and positive".into());
        }
        if self.architecture.head_widths.contains(&0) {
            return bad("head_widths must be positive".into());
        }
        if self.architecture.shared_heads && self.smoothing_coeff > 0.0 {
            return Err(Error::NotApplicable(
                "smoothing needs per-time heads; disable shared_heads or set smoothing_coeff = 0"
                    .into(),
            ));
        }
        if self.single_arm && matches!(self.balancing_mode, BalancingMode::Cfr1 | BalancingMode::Cfr2) {
            return bad("treated-vs-control balancing needs two arms".into());
        }
        self.sinkhorn.validate()
    }

    /// Whether the balancing term enters the loss at all.
    pub fn balancing_active(&self) -> bool {
        self.balancing_mode != BalancingMode::None && self.beta > 0.0
    }
}

/// One hazard head; `t == 0` marks a head shared across time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub arm: u8,
    pub t: usize,
    pub net: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvITEModel {
    pub phi: Mlp,
    pub heads: Vec<Head>,
    pub shared_head_mode: bool,
    pub arms: Vec<u8>,
    pub grid: TimeGrid,
}

impl SurvITEModel {
    pub fn new(
        d: usize,
        grid: TimeGrid,
        arch: &Architecture,
        single_arm: bool,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig("covariate dimension must be positive".into()));
        }
        let mut phi_dims = vec![d];
        phi_dims.extend(&arch.phi_widths);
        let phi = Mlp::new(&phi_dims, arch.activation, arch.activation, dropout, rng)?;
        let r = phi.output_dim();
        let head_in = if arch.shared_heads { r + 1 } else { r };
        let mut head_dims = vec![head_in];
        head_dims.extend(&arch.head_widths);
        head_dims.push(1);
        let arms: Vec<u8> = if single_arm { vec![0] } else { vec![0, 1] };
        let times: Vec<usize> = if arch.shared_heads {
            vec![0]
        } else {
            (1..=grid.t_max()).collect()
        };
        let mut heads = Vec::with_capacity(arms.len() * times.len());
        for &arm in &arms {
            for &t in &times {
                let net = Mlp::new(&head_dims, arch.activation, Activation::Sigmoid, dropout, rng)?;
                heads.push(Head { arm, t, net });
            }
        }
        Ok(Self {
            phi,
            heads,
            shared_head_mode: arch.shared_heads,
            arms,
            grid,
        })
    }

    pub fn t_max(&self) -> usize {
        self.grid.t_max()
    }

    pub fn input_dim(&self) -> usize {
        self.phi.input_dim()
    }

    pub fn repr_dim(&self) -> usize {
        self.phi.output_dim()
    }

    pub fn single_arm(&self) -> bool {
        self.arms.len() == 1
    }

    /// Index into `heads` serving arm `a` at bin `t`.
    pub fn head_index(&self, a: u8, t: usize) -> Option<usize> {
        if !self.arms.contains(&a) || t == 0 || t > self.t_max() {
            return None;
        }
        let arm_pos = a as usize;
        Some(if self.shared_head_mode {
            arm_pos
        } else {
            arm_pos * self.t_max() + (t - 1)
        })
    }

    /// Input rows for a head: the representation, plus scaled time in shared mode.
    pub(crate) fn head_input(&self, r: ArrayView2<f64>, t: usize) -> Array2<f64> {
        if self.shared_head_mode {
            let tcol = Array2::from_elem((r.nrows(), 1), t as f64 / self.t_max() as f64);
            concatenate(Axis(1), &[r, tcol.view()]).expect("matching rows")
        } else {
            r.to_owned()
        }
    }

    pub fn n_params(&self) -> usize {
        self.phi.n_params() + self.heads.iter().map(|h| h.net.n_params()).sum::<usize>()
    }

    /// Representation network first, then every head in order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.phi.param_slices();
        for h in &self.heads {
            out.extend(h.net.param_slices());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.phi.param_slices_mut();
        for h in &mut self.heads {
            out.extend(h.net.param_slices_mut());
        }
        out
    }

    fn check_x(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "model expects {} covariates, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode representation.
    pub fn represent(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_x(&x)?;
        self.phi.predict(x)
    }

    /// Evaluation-mode hazards, clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    /// A single-arm model fills both arm slots with its arm-0 hazards.
    pub fn hazards(&self, x: ArrayView2<f64>) -> Result<HazardSurface> {
        let r = self.represent(x)?;
        let mut out = HazardSurface::zeros(x.nrows(), self.grid.clone());
        for &a in &self.arms {
            for t in 1..=self.t_max() {
                let idx = self.head_index(a, t).expect("arm present");
                let p = self.heads[idx].net.predict(self.head_input(r.view(), t).view())?;
                for (i, &pi) in p.column(0).iter().enumerate() {
                    let h = pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    out.set(i, a, t, h);
                    if self.single_arm() {
                        out.set(i, 1, t, h);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn save_json(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config_hash: config_hash.into(),
            model: self.clone(),
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &ck)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(file)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!("unknown checkpoint format {:?}", ck.format)));
        }
        ck.model.validate()?;
        Ok((ck.model, ck.config_hash))
    }

    pub fn validate(&self) -> Result<()> {
        self.phi.validate()?;
        let expected = self.arms.len() * if self.shared_head_mode { 1 } else { self.t_max() };
        if self.heads.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} heads"),
                got: self.heads.len().to_string(),
            });
        }
        for &a in &self.arms {
            for t in 1..=self.t_max() {
                let h = &self.heads[self.head_index(a, t).expect("arm present")];
                let want_t = if self.shared_head_mode { 0 } else { t };
                if h.arm != a || h.t != want_t {
                    return Err(Error::InvalidInput(format!(
                        "head for (a={a}, t={t}) is labelled (a={}, t={})",
                        h.arm, h.t
                    )));
                }
                h.net.validate()?;
            }
        }
        Ok(())
    }
}

const CHECKPOINT_FORMAT: &str = "survite-model-v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config_hash: String,
    model: SurvITEModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub hazard: HazardSurface,
    pub survival: SurvivalSurface,
    /// `S^1 - S^0` per `(subject, t - 1)`; absent for single-arm models.
    pub hte_surv: Option<Array2<f64>>,
    pub hte_rmst: Vec<HorizonValues>,
}

impl PredictionBundle {
    pub fn from_hazard(hazard: HazardSurface, horizons: &[f64], two_arm: bool) -> Result<Self> {
        let survival = hazard.to_survival()?;
        let (hte_surv, hte_rmst) = if two_arm {
            let rmst = horizons
                .iter()
                .map(|&h| {
                    Ok(HorizonValues {
                        horizon: h,
                        values: survival.hte_rmst(h)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(survival.hte_surv()), rmst)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            hazard,
            survival,
            hte_surv,
            hte_rmst,
        })
    }

    /// `S^{a_i}(t | x_i)` for the given treatments.
    pub fn factual_survival(&self, treatments: &[u8], t: usize) -> Vec<f64> {
        treatments
            .iter()
            .enumerate()
            .map(|(i, &a)| self.survival.get(i, a, t))
            .collect()
    }

    pub fn hte_rmst_at(&self, horizon: f64) -> Option<&[f64]> {
        self.hte_rmst
            .iter()
            .find(|h| h.horizon == horizon)
            .map(|h| &h.values[..])
    }
}

pub fn predict(model: &SurvITEModel, x: ArrayView2<f64>, horizons: &[f64]) -> Result<PredictionBundle> {
    let hazard = model.hazards(x)?;
    PredictionBundle::from_hazard(hazard, horizons, !model.single_arm())
}
