//! Entropic Wasserstein distance between two point clouds.
//!
//! The distance follows the fixed-iteration Sinkhorn scheme with uniform
//! marginals, and its gradient holds the transport plan constant. A brute-force
//! permutation solver serves as the exact reference on small instances.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this value an entry of `exp(-lambda M)` counts as underflowed.
pub const KERNEL_FLOOR: f64 = 1e-300;

/// Largest side accepted by [`exact_ot`].
pub const EXACT_OT_MAX: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub iters: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            iters: 10,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) || self.iters == 0 {
            return Err(Error::InvalidConfig(format!(
                "sinkhorn needs lambda > 0 and iters >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Plan `T` (rows index the first set) together with the cost matrix it was computed on.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub cost: Array2<f64>,
}

impl TransportPlan {
    /// `sum_ij T_ij M_ij`.
    pub fn objective(&self) -> f64 {
        (&self.plan * &self.cost).sum()
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.plan.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.plan.sum_axis(Axis(0))
    }

    /// Writes `i,j,cost,plan` rows.
    pub fn write_debug<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["i", "j", "cost", "plan"])?;
        for ((i, j), m) in self.cost.indexed_iter() {
            wtr.write_record([
                i.to_string(),
                j.to_string(),
                m.to_string(),
                self.plan[[i, j]].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn check_sets(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyInput("transport needs two non-empty point sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} coordinates", a.ncols()),
            got: b.ncols().to_string(),
        });
    }
    Ok(())
}

/// Euclidean distances `M_ij = ||a_i - b_j||`.
pub fn pairwise_cost(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_sets(&a, &b)?;
    let mut m = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ai) in a.rows().into_iter().enumerate() {
        for (j, bj) in b.rows().into_iter().enumerate() {
            m[[i, j]] = ai
                .iter()
                .zip(bj.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(m)
}

/// Distances among the rows of one set, filled symmetrically with an exact zero diagonal.
pub fn self_cost(x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_sets(&x, &x)?;
    let n = x.nrows();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..i {
            let d = xi
                .iter()
                .zip(x.row(j).iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            m[[i, j]] = d;
            m[[j, i]] = d;
        }
    }
    Ok(m)
}

fn degenerate() -> Error {
    Error::DegenerateCost("a whole row or column of the kernel".into())
}

/// Sinkhorn plan for a precomputed cost matrix, returning `(sum T*M, T)`.
pub fn sinkhorn_from_cost(cost: &Array2<f64>, cfg: &SinkhornConfig) -> Result<(f64, Array2<f64>)> {
    cfg.validate()?;
    let (n1, n0) = cost.dim();
    if n1 == 0 || n0 == 0 {
        return Err(Error::EmptyInput("empty cost matrix".into()));
    }
    if cost.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(Error::InvalidInput("costs must be finite and nonnegative".into()));
    }
    let k = gibbs_kernel(cost, cfg.lambda);
    sinkhorn_with_kernel(cost, k, cfg.iters)
}

pub(crate) fn gibbs_kernel(cost: &Array2<f64>, lambda: f64) -> Array2<f64> {
    cost.mapv(|m| {
        let v = (-lambda * m).exp();
        if v < KERNEL_FLOOR {
            0.0
        } else {
            v
        }
    })
}

/// Sinkhorn iterations on a kernel already computed from `cost`; the caller has validated both.
pub(crate) fn sinkhorn_with_kernel(
    cost: &Array2<f64>,
    k: Array2<f64>,
    iters: usize,
) -> Result<(f64, Array2<f64>)> {
    let (n1, n0) = cost.dim();
    let a = 1.0 / n1 as f64;
    let b = 1.0 / n0 as f64;
    // K~ = diag(1/a) K, applied as n1 * K
    let scale = n1 as f64;
    let mut u = Array1::from_elem(n1, a);
    let ratio = |u: &Array1<f64>| -> Result<Array1<f64>> {
        let mut ktu = Array1::<f64>::zeros(n0);
        for (row, &ui) in k.rows().into_iter().zip(u.iter()) {
            ktu.scaled_add(ui, &row);
        }
        if ktu.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(degenerate());
        }
        Ok(ktu.mapv(|s| b / s))
    };
    for _ in 0..iters {
        let w = ratio(&u)?;
        for (ui, row) in u.iter_mut().zip(k.rows()) {
            let s = scale * row.dot(&w);
            if s <= 0.0 || !s.is_finite() {
                return Err(degenerate());
            }
            *ui = 1.0 / s;
        }
    }
    let v = ratio(&u)?;
    let mut plan = k;
    for ((i, j), t) in plan.indexed_iter_mut() {
        *t *= u[i] * v[j];
    }
    let dist = (&plan * cost).sum();
    Ok((dist, plan))
}

pub fn sinkhorn_distance(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    cfg: &SinkhornConfig,
) -> Result<(f64, TransportPlan)> {
    let cost = pairwise_cost(a, b)?;
    let (dist, plan) = sinkhorn_from_cost(&cost, cfg)?;
    Ok((dist, TransportPlan { plan, cost }))
}

/// Gradients of `sum T_ij ||a_i - b_j||` with `T` frozen, for every point of both sets.
pub fn sinkhorn_gradient(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    plan: &TransportPlan,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_sets(&a, &b)?;
    if plan.plan.dim() != (a.nrows(), b.nrows()) || plan.cost.dim() != plan.plan.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("plan {:?}", (a.nrows(), b.nrows())),
            got: format!("{:?}", plan.plan.dim()),
        });
    }
    let mut ga = Array2::zeros(a.raw_dim());
    let mut gb = Array2::zeros(b.raw_dim());
    for ((i, j), &t) in plan.plan.indexed_iter() {
        let m = plan.cost[[i, j]];
        if m == 0.0 || t == 0.0 {
            continue;
        }
        let c = t / m;
        for k in 0..a.ncols() {
            let diff = c * (a[[i, k]] - b[[j, k]]);
            ga[[i, k]] += diff;
            gb[[j, k]] -= diff;
        }
    }
    Ok((ga, gb))
}

/// Exact optimal transport between equal-size uniform sets by enumerating assignments.
pub fn exact_ot(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_sets(&a, &b)?;
    let (n1, n0) = (a.nrows(), b.nrows());
    if n1 != n0 || n1 > EXACT_OT_MAX {
        return Err(Error::OracleScope {
            max: EXACT_OT_MAX,
            n1,
            n0,
        });
    }
    let cost = pairwise_cost(a, b)?;
    let n = n1;
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>();
    let mut best = eval(&perm);
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}
