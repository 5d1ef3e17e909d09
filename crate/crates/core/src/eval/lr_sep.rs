use nalgebra::{DMatrix, DVector};
use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::survdata::{at_risk, Cohort, HazardSurface, TimeGrid};
use crate::survite::PredictionBundle;

pub const DEFAULT_L2: f64 = 1e-4;

const GRAD_TOL: f64 = 1e-6;
const MAX_NEWTON: usize = 200;

/// `P(y = 1 | x) = sigmoid(weights . x + intercept)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    /// Euclidean norm of the objective gradient at the returned point.
    pub grad_norm: f64,
}

impl LogisticFit {
    pub fn converged(&self) -> bool {
        self.grad_norm <= GRAD_TOL
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let z: f64 = self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.intercept;
        crate::sigmoid(z)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean log-loss plus `l2 / 2 * ||w||^2`; the intercept is not penalised.
fn objective(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, l2: f64) -> f64 {
    let d = x.ncols() - 1;
    let z = x * beta;
    let n = y.len() as f64;
    let loss: f64 = z.iter().zip(y).map(|(&z, &y)| softplus(z) - y * z).sum::<f64>() / n;
    loss + 0.5 * l2 * beta.rows(0, d).norm_squared()
}

/// Penalised logistic regression by damped Newton steps until the gradient
/// norm falls to `1e-6` or the iteration budget runs out.
pub fn fit_logistic(x: ArrayView2<f64>, y: &[f64], l2: f64) -> Result<LogisticFit> {
    let (n, d) = x.dim();
    if n == 0 || n != y.len() {
        return Err(invalid(format!("logistic fit on {n} rows and {} labels", y.len())));
    }
    if l2.is_nan() || l2 < 0.0 {
        return Err(invalid(format!("l2 strength must be >= 0, got {l2}")));
    }
    // design matrix with a trailing intercept column
    let xm = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[[i, j]] } else { 1.0 });
    let nf = n as f64;
    let mut beta = DVector::zeros(d + 1);
    let mut penalty = DVector::from_element(d + 1, l2);
    penalty[d] = 0.0;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < MAX_NEWTON {
        let z = &xm * &beta;
        let p = z.map(crate::sigmoid);
        let resid = DVector::from_iterator(n, p.iter().zip(y).map(|(p, y)| p - y));
        let grad = xm.tr_mul(&resid) / nf + penalty.component_mul(&beta);
        grad_norm = grad.norm();
        if grad_norm <= GRAD_TOL {
            break;
        }
        let s = p.map(|p| p * (1.0 - p));
        let mut xs = xm.clone();
        for (mut row, &si) in xs.row_iter_mut().zip(s.iter()) {
            row *= si;
        }
        let mut hess = xm.tr_mul(&xs) / nf;
        for k in 0..=d {
            hess[(k, k)] += penalty[k] + 1e-12;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let f0 = objective(&xm, y, &beta, l2);
        let slope = grad.dot(&step);
        let mut eta = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta - &step * eta;
            if objective(&xm, y, &cand, l2) <= f0 - 1e-4 * eta * slope {
                beta = cand;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    Ok(LogisticFit {
        weights: beta.rows(0, d).iter().copied().collect(),
        intercept: beta[d],
        iterations,
        grad_norm,
    })
}

/// Separate logistic hazard models per `(arm, t)`, each fitted on its at-risk set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LRSepModel {
    /// Index `a * t_max + (t - 1)`; `None` where the cell had nobody at risk.
    pub cells: Vec<Option<LogisticFit>>,
    pub l2: f64,
    pub d: usize,
    pub grid: TimeGrid,
}

pub fn fit_lr_sep(cohort: &Cohort, l2: f64) -> Result<LRSepModel> {
    let t_max = cohort.t_max();
    let x = cohort.covariates();
    let cells = (0..2 * t_max)
        .into_par_iter()
        .map(|k| {
            let (a, t) = ((k / t_max) as u8, k % t_max + 1);
            let rows = at_risk(cohort, t, a)?;
            if rows.is_empty() {
                return Ok(None);
            }
            let xs = x.select(Axis(0), &rows);
            let y: Vec<f64> = rows
                .iter()
                .map(|&i| f64::from(u8::from(cohort.records()[i].label(t))))
                .collect();
            fit_logistic(xs.view(), &y, l2).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LRSepModel {
        cells,
        l2,
        d: cohort.dim(),
        grid: cohort.grid().clone(),
    })
}

impl LRSepModel {
    pub fn t_max(&self) -> usize {
        self.grid.t_max()
    }

    pub fn cell(&self, a: u8, t: usize) -> Option<&LogisticFit> {
        self.cells.get(a as usize * self.t_max() + t - 1)?.as_ref()
    }

    /// Cells without a fit; their hazard is reported as zero.
    pub fn absent_cells(&self) -> Vec<(u8, usize)> {
        (0..2u8)
            .flat_map(|a| (1..=self.t_max()).map(move |t| (a, t)))
            .filter(|&(a, t)| self.cell(a, t).is_none())
            .collect()
    }

    pub fn has_arm(&self, a: u8) -> bool {
        (1..=self.t_max()).any(|t| self.cell(a, t).is_some())
    }

    pub fn hazards(&self, x: ArrayView2<f64>) -> Result<HazardSurface> {
        if x.ncols() != self.d {
            return Err(invalid(format!("model expects {} covariates, got {}", self.d, x.ncols())));
        }
        let mut out = HazardSurface::zeros(x.nrows(), self.grid.clone());
        for (i, row) in x.rows().into_iter().enumerate() {
            let xi = row.to_vec();
            for a in 0..2u8 {
                for t in 1..=self.t_max() {
                    if let Some(fit) = self.cell(a, t) {
                        out.set(i, a, t, fit.predict(&xi));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: ArrayView2<f64>, horizons: &[f64]) -> Result<PredictionBundle> {
        let mut hz = self.hazards(x)?;
        let two_arm = self.has_arm(0) && self.has_arm(1);
        if !two_arm {
            let only = u8::from(self.has_arm(1));
            for i in 0..hz.n_subjects() {
                for t in 1..=self.t_max() {
                    let v = hz.get(i, only, t);
                    hz.set(i, 1 - only, t, v);
                }
            }
        }
        PredictionBundle::from_hazard(hz, horizons, two_arm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{toy_generate, ToyConfig};
    use crate::seeded_rng;
    use crate::survdata::ShortRecord;
    use ndarray::Array2;
    use rand::Rng as _;

    #[test]
    fn recovers_well_specified_first_hazard() {
        let (cohort, _) = toy_generate(&ToyConfig {
            n: 20_000,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        let m = fit_lr_sep(&cohort, DEFAULT_L2).unwrap();
        let fit = m.cell(0, 1).unwrap();
        assert!(fit.converged());
        assert!((fit.weights[0] - 1.0).abs() < 0.1, "{:?}", fit.weights);
        assert!((fit.intercept + 0.25).abs() < 0.1, "{}", fit.intercept);
        assert!(fit.weights[1..].iter().all(|w| w.abs() < 0.1));
        assert_eq!(m.absent_cells().len(), 20);
    }

    #[test]
    fn all_zero_labels_give_tiny_hazard() {
        let mut rng = seeded_rng(1);
        let x = Array2::from_shape_simple_fn((200, 3), || rng.random::<f64>() * 2.0 - 1.0);
        let fit = fit_logistic(x.view(), &[0.0; 200], DEFAULT_L2).unwrap();
        for row in x.rows() {
            assert!(fit.predict(&row.to_vec()) < 0.01);
        }
    }

    #[test]
    fn intercept_only_matches_label_mean() {
        let x = Array2::zeros((10, 2));
        let y = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let fit = fit_logistic(x.view(), &y, DEFAULT_L2).unwrap();
        assert!(fit.converged());
        let logit = (0.6f64 / 0.4).ln();
        assert!((fit.intercept - logit).abs() < 1e-5);
        assert!(fit_logistic(x.view(), &[1.0, 0.0], DEFAULT_L2).is_err());
    }

    #[test]
    fn subjects_no_longer_at_risk_are_ignored() {
        let mut rng = seeded_rng(2);
        let grid = TimeGrid::uniform(1.0, 3).unwrap();
        let records: Vec<ShortRecord> = (0..80)
            .map(|_| ShortRecord {
                x: vec![rng.random(), rng.random()],
                a: rng.random_range(0..2),
                tau_tilde: rng.random_range(1..=3),
                delta: rng.random(),
            })
            .collect();
        let cohort = Cohort::new(records, grid).unwrap();
        let full = fit_lr_sep(&cohort, DEFAULT_L2).unwrap();
        let keep: Vec<usize> = (0..cohort.len())
            .filter(|&i| cohort.records()[i].tau_tilde >= 2)
            .collect();
        let late = fit_lr_sep(&cohort.subset(&keep), DEFAULT_L2).unwrap();
        for a in 0..2 {
            for t in 2..=3 {
                assert_eq!(full.cell(a, t), late.cell(a, t));
            }
        }
    }
}
