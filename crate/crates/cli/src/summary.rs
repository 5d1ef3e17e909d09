//! Long-format aggregation over replications.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use survite_core::eval::MetricRow;

/// One plot-ready row: a metric for one method at one `(arm, t, horizon)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub metric: String,
    pub arm: Option<u8>,
    pub t: Option<usize>,
    pub horizon: Option<f64>,
    pub mean: f64,
    pub sd: f64,
    /// Half-width of the 95% t-interval over replications; NaN with one replication.
    pub ci95: f64,
    pub n_reps: usize,
}

/// `t_{0.975, n-1} * sd / sqrt(n)` with the sample standard deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::NAN, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("dof >= 1")
        .inverse_cdf(0.975);
    (mean, sd, t * sd / (n as f64).sqrt())
}

type Key = (String, Option<u8>, Option<usize>, Option<u64>);

/// Aggregates per-replication reports of one method, keeping first-seen row order.
/// Non-finite values (e.g. a C-index with no comparable pair) are left out of a cell.
pub fn aggregate(method: &str, reps: &[Vec<MetricRow>]) -> Vec<SummaryRow> {
    let mut order: Vec<Key> = Vec::new();
    let mut cells: HashMap<Key, Vec<f64>> = HashMap::new();
    for rows in reps {
        for r in rows {
            let key = (r.metric.clone(), r.arm, r.t, r.horizon.map(f64::to_bits));
            let cell = cells.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                Vec::new()
            });
            if r.value.is_finite() {
                cell.push(r.value);
            }
        }
    }
    order
        .into_iter()
        .map(|key| {
            let values = &cells[&key];
            let (mean, sd, ci95) = mean_ci95(values);
            SummaryRow {
                method: method.to_string(),
                metric: key.0,
                arm: key.1,
                t: key.2,
                horizon: key.3.map(f64::from_bits),
                mean,
                sd,
                ci95,
                n_reps: values.len(),
            }
        })
        .collect()
}
