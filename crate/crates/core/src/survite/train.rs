use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::objective;
use super::{predict, BalancingMode, SurvITEModel, TrainConfig};
use crate::diffnet::AdamState;
use crate::error::{Error, Result};
use crate::eval::c_index;
use crate::survdata::{Cohort, ShortRecord};
use crate::{derive_seed, seeded_rng};

/// Per-epoch training means. `l_target = l_risk + beta * l_ipm + gamma * l_smoothing`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_risk: f64,
    pub l_ipm: f64,
    pub l_smoothing: f64,
    pub l_target: f64,
    pub val_risk: Option<f64>,
    pub skipped_cells: usize,
    pub wall_time_s: f64,
}

impl EpochRecord {
    /// Equality of everything except wall time.
    pub fn same_trajectory(&self, other: &EpochRecord) -> bool {
        EpochRecord {
            wall_time_s: 0.0,
            ..self.clone()
        } == EpochRecord {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    /// Called with every new best model, so callers can keep a last-good checkpoint.
    fn on_improvement(&mut self, _model: &SurvITEModel, _epoch: usize) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: SurvITEModel,
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

pub fn train(cohort: &Cohort, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with(cohort, cfg, &mut NoopObserver)
}

pub fn train_with(
    cohort: &Cohort,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedModel> {
    let (train_idx, val_idx) = split(cohort.len(), cfg)?;
    fit(cohort, cfg, train_idx, val_idx, derive_seed(cfg.seed, 1), observer)
}

fn split(n: usize, cfg: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(derive_seed(cfg.seed, 0)));
    let n_val = (n as f64 * cfg.val_fraction).round() as usize;
    if n - n_val < 2 {
        return Err(Error::InvalidInput(format!(
            "{n} subjects leave fewer than two for training"
        )));
    }
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

fn diverged(epoch: usize, reason: impl Into<String>) -> Error {
    Error::TrainingDiverged {
        epoch,
        reason: reason.into(),
    }
}

fn fit(
    cohort: &Cohort,
    cfg: &TrainConfig,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    model_seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(Error::EmptyInput("cannot train on an empty cohort".into()));
    }
    if cfg.single_arm && cohort.arms_present()[1] {
        return Err(Error::InvalidInput(
            "single-arm training needs a cohort without treated subjects".into(),
        ));
    }
    let mut init_rng = seeded_rng(derive_seed(model_seed, 0));
    let mut shuffle_rng = seeded_rng(derive_seed(model_seed, 1));
    let mut dropout_rng = seeded_rng(derive_seed(model_seed, 2));
    let mut model = SurvITEModel::new(
        cohort.dim(),
        cohort.grid().clone(),
        &cfg.architecture,
        cfg.single_arm,
        cfg.dropout,
        &mut init_rng,
    )?;
    let mut adam = AdamState::for_params(&model.param_slices(), cfg.lr);
    let x_all = cohort.covariates();
    let records = cohort.records();
    let x_val = x_all.select(Axis(0), &val_idx);
    let val_refs: Vec<&ShortRecord> = val_idx.iter().map(|&i| &records[i]).collect();
    // early stopping watches the risk term only
    let val_cfg = TrainConfig {
        balancing_mode: BalancingMode::None,
        smoothing_coeff: 0.0,
        ..cfg.clone()
    };

    let mut order = train_idx.clone();
    let mut log = Vec::new();
    let mut best: Option<(f64, SurvITEModel, usize)> = None;
    let mut wait = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut risk, mut ipm, mut smooth, mut skipped, mut batches) = (0.0, 0.0, 0.0, 0, 0);
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let xb = x_all.select(Axis(0), batch);
            let refs: Vec<&ShortRecord> = batch.iter().map(|&i| &records[i]).collect();
            let obj = objective(&model, xb.view(), &refs, cfg, true, true, &mut dropout_rng)?;
            let target = obj.l_risk + cfg.beta * obj.l_ipm + cfg.smoothing_coeff * obj.l_smoothing;
            if !target.is_finite() {
                return Err(diverged(epoch, format!("non-finite loss {target}")));
            }
            let grads = obj.grads.expect("gradients requested");
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| &g[..]).collect();
            adam.step(&mut model.param_slices_mut(), &grad_refs)
                .map_err(|e| match e {
                    Error::TrainingDiverged { reason, .. } => diverged(epoch, reason),
                    other => other,
                })?;
            risk += obj.l_risk;
            ipm += obj.l_ipm;
            smooth += obj.l_smoothing;
            skipped += obj.skipped;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::InvalidInput("no minibatch with at least two subjects".into()));
        }
        let nb = batches as f64;
        let (l_risk, l_ipm, l_smoothing) = (risk / nb, ipm / nb, smooth / nb);
        let val_risk = if val_idx.is_empty() {
            None
        } else {
            let o = objective(&model, x_val.view(), &val_refs, &val_cfg, false, false, &mut dropout_rng)?;
            if !o.l_risk.is_finite() {
                return Err(diverged(epoch, "non-finite validation loss"));
            }
            Some(o.l_risk)
        };
        let record = EpochRecord {
            epoch,
            l_risk,
            l_ipm,
            l_smoothing,
            l_target: l_risk + cfg.beta * l_ipm + cfg.smoothing_coeff * l_smoothing,
            val_risk,
            skipped_cells: skipped,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        observer.on_epoch(&record)?;
        log.push(record);

        let metric = val_risk.unwrap_or(l_risk);
        if best.as_ref().is_none_or(|(b, _, _)| metric < *b) {
            observer.on_improvement(&model, epoch)?;
            best = Some((metric, model.clone(), epoch));
            wait = 0;
        } else {
            wait += 1;
            if cfg.patience > 0 && wait >= cfg.patience {
                break;
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, m, e)) => (m, e),
        None => (model, 0),
    };
    Ok(TrainedModel {
        model,
        log,
        best_epoch,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaReport {
    pub beta: f64,
    /// Validation C-index; `None` if training failed or no pair was comparable.
    pub c_index: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct BetaSelection {
    pub chosen: f64,
    pub reports: Vec<BetaReport>,
    pub model: TrainedModel,
}

/// Largest beta whose score is within `tolerance` of the best score.
pub fn choose_beta(scores: &[(f64, f64)], tolerance: f64) -> Option<f64> {
    let best = scores
        .iter()
        .map(|&(_, c)| c)
        .filter(|c| c.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return None;
    }
    scores
        .iter()
        .filter(|&&(_, c)| c.is_finite() && c >= best - tolerance - 1e-12)
        .map(|&(b, _)| b)
        .fold(None, |acc: Option<f64>, b| Some(acc.map_or(b, |a| a.max(b))))
}

/// Trains one model per candidate on a shared train/validation split and keeps
/// the largest beta that does not lose more than `cfg.beta_tolerance` validation C-index.
pub fn select_beta(cohort: &Cohort, cfg: &TrainConfig, candidates: &[f64]) -> Result<BetaSelection> {
    select_beta_with(cohort, cfg, candidates, |_, _| {})
}

/// As [`select_beta`], reporting each finished candidate to `progress`.
pub fn select_beta_with(
    cohort: &Cohort,
    cfg: &TrainConfig,
    candidates: &[f64],
    progress: impl Fn(f64, &Result<TrainedModel>) + Sync,
) -> Result<BetaSelection> {
    let runs = sweep_beta_with(cohort, cfg, candidates, progress)?;
    let scores: Vec<(f64, f64)> = runs
        .iter()
        .filter(|r| r.model.is_some())
        .map(|r| (r.report.beta, r.report.c_index.unwrap_or(f64::NAN)))
        .collect();
    if scores.is_empty() {
        return Err(Error::SelectionFailed);
    }
    let chosen = choose_beta(&scores, cfg.beta_tolerance)
        .or_else(|| scores.iter().map(|(b, _)| *b).reduce(f64::max))
        .ok_or(Error::SelectionFailed)?;
    let mut reports = Vec::with_capacity(runs.len());
    let mut model = None;
    for run in runs {
        if run.report.beta == chosen && model.is_none() {
            model = run.model;
        }
        reports.push(run.report);
    }
    let model = model.ok_or(Error::SelectionFailed)?;
    Ok(BetaSelection {
        chosen,
        reports,
        model,
    })
}

/// One candidate of a beta sweep: its validation report and, unless training failed, the model.
#[derive(Clone, Debug)]
pub struct BetaRun {
    pub report: BetaReport,
    pub model: Option<TrainedModel>,
}

/// Trains every candidate exactly as [`select_beta`] does and returns all of them.
pub fn sweep_beta_with(
    cohort: &Cohort,
    cfg: &TrainConfig,
    candidates: &[f64],
    progress: impl Fn(f64, &Result<TrainedModel>) + Sync,
) -> Result<Vec<BetaRun>> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no beta candidates".into()));
    }
    let (train_idx, val_idx) = split(cohort.len(), cfg)?;
    if val_idx.is_empty() {
        return Err(Error::InvalidConfig("beta selection needs val_fraction > 0".into()));
    }
    let t_eval = cfg.eval_time.unwrap_or(cohort.t_max());
    if t_eval == 0 || t_eval > cohort.t_max() {
        return Err(Error::InvalidConfig(format!("eval_time {t_eval} outside 1..={}", cohort.t_max())));
    }
    let val = cohort.subset(&val_idx);
    let runs: Vec<(f64, Result<TrainedModel>)> = candidates
        .par_iter()
        .enumerate()
        .map(|(k, &beta)| {
            let cfg_k = TrainConfig {
                beta,
                ..cfg.clone()
            };
            let seed = derive_seed(cfg.seed, 100 + k as u64);
            let res = fit(cohort, &cfg_k, train_idx.clone(), val_idx.clone(), seed, &mut NoopObserver);
            progress(beta, &res);
            (beta, res)
        })
        .collect();
    runs.into_iter()
        .map(|(beta, res)| match res {
            Ok(tm) => {
                let bundle = predict(&tm.model, val.covariates().view(), &[])?;
                let pred = bundle.factual_survival(&val.treatments(), t_eval);
                let c = c_index(&pred, &val, t_eval)?;
                Ok(BetaRun {
                    report: BetaReport {
                        beta,
                        c_index: c.is_finite().then_some(c),
                        error: None,
                    },
                    model: Some(tm),
                })
            }
            Err(e) => Ok(BetaRun {
                report: BetaReport {
                    beta,
                    c_index: None,
                    error: Some(e.to_string()),
                },
                model: None,
            }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{Architecture, BalancingMode};
    use super::*;
    use crate::dgp::{toy_generate, ToyConfig};
    use crate::dgp::{generate, Scenario, SyntheticConfig};
    use crate::survdata::TimeGrid;

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 6,
            batch_size: 64,
            patience: 0,
            architecture: Architecture {
                phi_widths: vec![16, 8],
                head_widths: vec![8],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn s3(n: usize, seed: u64) -> Cohort {
        let mut cfg = SyntheticConfig::new(Scenario::S3).with_seed(seed).with_n(n);
        cfg.t_max = 30;
        generate(&cfg).unwrap().0
    }

    #[test]
    fn choose_beta_rule() {
        let grid = [1.0, 0.1, 0.01, 0.001, 0.0001];
        let zip = |c: [f64; 5]| grid.iter().copied().zip(c).collect::<Vec<_>>();
        assert_eq!(choose_beta(&zip([0.7; 5]), 0.01), Some(1.0));
        assert_eq!(choose_beta(&zip([0.70, 0.70, 0.695, 0.60, 0.55]), 0.01), Some(1.0));
        assert_eq!(choose_beta(&zip([0.55, 0.69, 0.70, 0.70, 0.70]), 0.01), Some(0.1));
        assert_eq!(choose_beta(&zip([f64::NAN; 5]), 0.01), None);
    }

    #[test]
    fn deterministic_and_beta_zero_matches_no_balancing() {
        let cohort = s3(300, 1);
        let a = TrainConfig {
            beta: 0.0,
            balancing_mode: BalancingMode::Survite,
            ..quick_cfg()
        };
        let b = TrainConfig {
            beta: 0.5,
            balancing_mode: BalancingMode::None,
            ..quick_cfg()
        };
        let ra = train(&cohort, &a).unwrap();
        let ra2 = train(&cohort, &a).unwrap();
        let rb = train(&cohort, &b).unwrap();
        assert_eq!(ra.model, ra2.model);
        assert_eq!(ra.model, rb.model);
        assert_eq!(ra.log.len(), rb.log.len());
        for (x, y) in ra.log.iter().zip(&rb.log) {
            assert!(x.same_trajectory(y));
        }
        let ser = |m: &SurvITEModel| serde_json::to_string(m).unwrap();
        assert_eq!(ser(&ra.model), ser(&ra2.model));
    }

    #[test]
    fn risk_falls_and_ipm_is_positive_under_selection() {
        let cohort = s3(600, 2);
        let cfg = TrainConfig {
            beta: 0.01,
            balancing_mode: BalancingMode::Survite,
            ..quick_cfg()
        };
        let tm = train(&cohort, &cfg).unwrap();
        assert!(tm.log[0].l_ipm > 0.0);
        assert!(tm.log[5].l_risk < tm.log[0].l_risk);
        for r in &tm.log {
            let recomposed = r.l_risk + cfg.beta * r.l_ipm + cfg.smoothing_coeff * r.l_smoothing;
            assert_eq!(recomposed, r.l_target);
        }
    }

    #[test]
    fn single_arm_model_has_no_treated_heads() {
        let (cohort, _) = toy_generate(&ToyConfig {
            n: 200,
            t_max: 5,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            single_arm: true,
            beta: 0.1,
            balancing_mode: BalancingMode::Survite,
            smoothing_coeff: 0.01,
            ..quick_cfg()
        };
        let tm = train(&cohort, &cfg).unwrap();
        assert!(tm.model.heads.iter().all(|h| h.arm == 0));
        let b = predict(&tm.model, cohort.covariates().view(), &[3.0]).unwrap();
        assert!(b.hte_surv.is_none() && b.hte_rmst.is_empty());
        // two-arm cohorts are refused
        let treated = s3(50, 3);
        assert!(train(&treated, &cfg).is_err());
    }

    #[test]
    fn toy_well_specified_hazard_is_learned() {
        let (cohort, _) = toy_generate(&ToyConfig {
            n: 12_000,
            t_max: 5,
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        let (test, oracle) = toy_generate(&ToyConfig {
            n: 1000,
            t_max: 5,
            seed: 8,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            single_arm: true,
            epochs: 200,
            patience: 20,
            dropout: 0.0,
            ..quick_cfg()
        };
        let tm = train(&cohort, &cfg).unwrap();
        let hz = tm.model.hazards(test.covariates().view()).unwrap();
        let mut se = 0.0;
        let mut n = 0.0;
        for i in 0..test.len() {
            for t in 1..=5 {
                se += (hz.get(i, 0, t) - oracle.event_hazard.get(i, 0, t)).powi(2);
                n += 1.0;
            }
        }
        let rmse = (se / n).sqrt();
        assert!(rmse < 0.05, "rmse {rmse}");
    }

    #[test]
    fn select_beta_returns_a_candidate() {
        let cohort = s3(300, 4);
        let cfg = TrainConfig {
            balancing_mode: BalancingMode::Survite,
            epochs: 2,
            ..quick_cfg()
        };
        let sel = select_beta(&cohort, &cfg, &[1.0, 0.01]).unwrap();
        assert!(sel.chosen == 1.0 || sel.chosen == 0.01);
        assert_eq!(sel.reports.len(), 2);
        let scores: Vec<(f64, f64)> = sel
            .reports
            .iter()
            .map(|r| (r.beta, r.c_index.unwrap_or(f64::NAN)))
            .collect();
        assert_eq!(choose_beta(&scores, cfg.beta_tolerance), Some(sel.chosen));
        assert_eq!(sel.model.model.heads.len(), 60);

        let runs = sweep_beta_with(&cohort, &cfg, &[1.0, 0.01], |_, _| {}).unwrap();
        let chosen = runs.iter().find(|r| r.report.beta == sel.chosen).unwrap();
        assert_eq!(chosen.model.as_ref().unwrap().model, sel.model.model);
        assert_eq!(runs[0].report.c_index, sel.reports[0].c_index);
    }

    #[test]
    fn tiny_cohort_is_rejected() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let cohort = Cohort::new(
            vec![ShortRecord {
                x: vec![0.0],
                a: 0,
                tau_tilde: 1,
                delta: true,
            }],
            grid,
        )
        .unwrap();
        assert!(train(&cohort, &quick_cfg()).is_err());
    }
}
