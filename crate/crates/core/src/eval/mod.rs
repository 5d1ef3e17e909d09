//! Per-time logistic-regression baseline and evaluation metrics.

mod lr_sep;

pub use lr_sep::{fit_lr_sep, fit_logistic, LRSepModel, LogisticFit, DEFAULT_L2};

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dgp::OracleTruth;
use crate::error::{invalid, Error, Result};
use crate::survdata::{Cohort, HazardSurface, SurvivalSurface};
use crate::survite::PredictionBundle;

/// Root mean squared difference between two equally long vectors.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(invalid(format!(
            "rmse over {} predictions and {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("rmse over zero subjects".into()));
    }
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

fn check_bin(t: usize, t_max: usize) -> Result<()> {
    if t == 0 || t > t_max {
        return Err(invalid(format!("time bin {t} outside 1..={t_max}")));
    }
    Ok(())
}

fn column(values: &ndarray::Array3<f64>, arm: u8, t: usize) -> Vec<f64> {
    values
        .slice(ndarray::s![.., arm as usize, t - 1])
        .to_vec()
}

pub fn rmse_survival(pred: &SurvivalSurface, truth: &SurvivalSurface, arm: u8, t: usize) -> Result<f64> {
    check_bin(t, pred.grid.t_max().min(truth.grid.t_max()))?;
    rmse(&column(&pred.values, arm, t), &column(&truth.values, arm, t))
}

pub fn rmse_hazard(pred: &HazardSurface, truth: &HazardSurface, arm: u8, t: usize) -> Result<f64> {
    check_bin(t, pred.grid.t_max().min(truth.grid.t_max()))?;
    rmse(&column(&pred.values, arm, t), &column(&truth.values, arm, t))
}

/// RMSE of `S^1 - S^0` at bin `t`, both given as `(subject, t - 1)` arrays.
pub fn rmse_hte_surv(pred: ArrayView2<f64>, truth: ArrayView2<f64>, t: usize) -> Result<f64> {
    check_bin(t, pred.ncols().min(truth.ncols()))?;
    rmse(&pred.column(t - 1).to_vec(), &truth.column(t - 1).to_vec())
}

/// RMSE between the predicted RMST difference up to `horizon` and its ground truth.
pub fn rmse_hte_rmst(pred: &SurvivalSurface, truth: Option<&[f64]>, horizon: f64) -> Result<f64> {
    let truth = truth.ok_or_else(|| {
        Error::NotApplicable(format!("no ground-truth RMST difference at L = {horizon}"))
    })?;
    if !(horizon > 0.0 && horizon <= pred.grid.horizon()) {
        return Err(invalid(format!(
            "horizon {horizon} outside (0, {}]",
            pred.grid.horizon()
        )));
    }
    let est = pred.hte_rmst(horizon)?;
    rmse(&est, truth)
}

/// Time-dependent concordance at bin `t`.
///
/// Pairs `(i, j)` with `delta_i = 1`, `tau_i <= t` and `tau_i < tau_j` are
/// comparable; a pair is concordant when `pred_i < pred_j` and a tie earns
/// half credit. Returns NaN when no pair is comparable.
pub fn c_index_raw(pred: &[f64], tau: &[usize], delta: &[bool], t: usize) -> Result<f64> {
    if pred.len() != tau.len() || tau.len() != delta.len() {
        return Err(invalid("c-index inputs differ in length"));
    }
    let (mut credit, mut pairs) = (0.0, 0u64);
    for i in 0..pred.len() {
        if !delta[i] || tau[i] > t {
            continue;
        }
        for j in 0..pred.len() {
            if tau[i] < tau[j] {
                pairs += 1;
                if pred[i] < pred[j] {
                    credit += 1.0;
                } else if pred[i] == pred[j] {
                    credit += 0.5;
                }
            }
        }
    }
    Ok(if pairs == 0 { f64::NAN } else { credit / pairs as f64 })
}

/// [`c_index_raw`] with outcomes taken from a cohort.
pub fn c_index(pred: &[f64], cohort: &Cohort, t: usize) -> Result<f64> {
    let tau: Vec<usize> = cohort.records().iter().map(|r| r.tau_tilde).collect();
    let delta: Vec<bool> = cohort.records().iter().map(|r| r.delta).collect();
    c_index_raw(pred, &tau, &delta, t)
}

/// One metric value. `arm`, `t` and `horizon` are set where the metric has them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub arm: Option<u8>,
    pub t: Option<usize>,
    pub horizon: Option<f64>,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(
        &mut self,
        prov: &Provenance,
        metric: &str,
        arm: Option<u8>,
        t: Option<usize>,
        horizon: Option<f64>,
        value: f64,
    ) {
        self.rows.push(MetricRow {
            metric: metric.into(),
            arm,
            t,
            horizon,
            value,
            n: prov.n,
            seed: prov.seed,
            config_hash: prov.config_hash.clone(),
        });
    }

    pub fn get(&self, metric: &str, arm: Option<u8>, t: Option<usize>, horizon: Option<f64>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.arm == arm && r.t == t && r.horizon == horizon)
            .map(|r| r.value)
    }

    /// Mean of a per-time metric over all bins it was recorded at.
    pub fn mean_over_time(&self, metric: &str, arm: Option<u8>) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.metric == metric && r.arm == arm && r.t.is_some())
            .map(|r| r.value)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Every metric of a prediction against synthetic ground truth on the cohort
/// the predictions were made for.
pub fn evaluate(
    pred: &PredictionBundle,
    oracle: &OracleTruth,
    cohort: &Cohort,
    horizons: &[f64],
    prov: &Provenance,
) -> Result<MetricReport> {
    let n = cohort.len();
    if pred.hazard.n_subjects() != n || oracle.event_hazard.n_subjects() != n {
        return Err(invalid("prediction, oracle and cohort cover different subjects"));
    }
    let t_max = cohort.t_max();
    let two_arm = pred.hte_surv.is_some();
    let arms: &[u8] = if two_arm { &[0, 1] } else { &[0] };
    let mut report = MetricReport::default();
    let treatments = cohort.treatments();
    for t in 1..=t_max {
        for &a in arms {
            report.push(prov, "rmse_hazard", Some(a), Some(t), None, rmse_hazard(&pred.hazard, &oracle.event_hazard, a, t)?);
            report.push(prov, "rmse_survival", Some(a), Some(t), None, rmse_survival(&pred.survival, &oracle.survival, a, t)?);
        }
        if let Some(hte) = &pred.hte_surv {
            report.push(prov, "rmse_hte_surv", None, Some(t), None, rmse_hte_surv(hte.view(), oracle.hte_surv.view(), t)?);
        }
        let factual = pred.factual_survival(&treatments, t);
        report.push(prov, "c_index", None, Some(t), None, c_index(&factual, cohort, t)?);
    }
    if two_arm {
        for &h in horizons {
            let truth = oracle.hte_rmst_at(h)?;
            report.push(prov, "rmse_hte_rmst", None, None, Some(h), rmse_hte_rmst(&pred.survival, Some(&truth), h)?);
        }
    }
    Ok(report)
}
