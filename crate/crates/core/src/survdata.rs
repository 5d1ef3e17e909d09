//! Discrete-time survival data model.
//!
//! Observations arrive in *short* format, one `(x, a, tau_tilde, delta)` row per
//! subject, and are expanded into the *long* format used for hazard
//! classification: one row per subject and time bin while the subject is at
//! risk. Time bins are 1-based, `1..=t_max`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Contiguous time bins. Bin `k` covers `[edges[k-1], edges[k])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    edges: Vec<f64>,
}

impl TimeGrid {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(invalid("time grid needs at least two edges (t_max >= 1)"));
        }
        if edges[0] != 0.0 {
            return Err(invalid("time grid must start at 0"));
        }
        if edges.iter().any(|e| !e.is_finite()) {
            return Err(invalid("time grid edges must be finite"));
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("time grid edges must be strictly increasing"));
        }
        Ok(Self { edges })
    }

    pub fn uniform(width: f64, t_max: usize) -> Result<Self> {
        if width.is_nan() || width <= 0.0 || t_max == 0 {
            return Err(invalid("uniform grid needs width > 0 and t_max >= 1"));
        }
        Self::new((0..=t_max).map(|k| k as f64 * width).collect())
    }

    /// Daily bins over the first 30 days, then 30-day months, closed at day 365.
    pub fn twins() -> Self {
        let mut edges: Vec<f64> = (0..=30).map(f64::from).collect();
        let mut e = 60.0;
        while e <= 360.0 {
            edges.push(e);
            e += 30.0;
        }
        edges.push(365.0);
        Self { edges }
    }

    /// Parses either `uniform(width, t_max)`, `twins`, or a comma-separated edge list.
    pub fn parse(spec: &str) -> Result<Self> {
        let s = spec.trim();
        if s.eq_ignore_ascii_case("twins") {
            return Ok(Self::twins());
        }
        if let Some(inner) = s
            .strip_prefix("uniform(")
            .and_then(|rest| rest.strip_suffix(')'))
        {
            let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(invalid(format!("cannot parse grid spec {s:?}")));
            }
            let width: f64 = parts[0]
                .parse()
                .map_err(|_| invalid(format!("bad grid width {:?}", parts[0])))?;
            let t_max: usize = parts[1]
                .parse()
                .map_err(|_| invalid(format!("bad grid t_max {:?}", parts[1])))?;
            return Self::uniform(width, t_max);
        }
        let edges = s
            .trim_start_matches('[')
            .trim_end_matches(']')
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| invalid(format!("bad grid edge {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(edges)
    }

    pub fn t_max(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Last edge, the administrative horizon in raw units.
    pub fn horizon(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    /// Upper edge `t_k` of bin `t`.
    pub fn upper(&self, t: usize) -> f64 {
        self.edges[t]
    }

    /// Width `t_k - t_{k-1}` of bin `t`.
    pub fn width(&self, t: usize) -> f64 {
        self.edges[t] - self.edges[t - 1]
    }

    /// A raw time that falls inside bin `t`.
    pub fn midpoint(&self, t: usize) -> f64 {
        0.5 * (self.edges[t - 1] + self.edges[t])
    }
}

/// Result of mapping a raw time onto a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discretized {
    Bin(usize),
    /// At or beyond the horizon: record as `tau_tilde = t_max`, `delta = 0`.
    AdministrativeCensor,
}

pub fn discretize_time(raw_time: f64, grid: &TimeGrid) -> Result<Discretized> {
    if raw_time.is_nan() || raw_time < 0.0 {
        return Err(invalid(format!("raw time must be nonnegative, got {raw_time}")));
    }
    let edges = grid.edges();
    if raw_time >= grid.horizon() {
        return Ok(Discretized::AdministrativeCensor);
    }
    // smallest k with raw < edges[k]
    let k = edges.partition_point(|&e| e <= raw_time);
    Ok(Discretized::Bin(k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortRecord {
    pub x: Vec<f64>,
    pub a: u8,
    pub tau_tilde: usize,
    pub delta: bool,
}

impl ShortRecord {
    /// Builds a record from a raw observed time, applying administrative censoring.
    pub fn from_raw(x: Vec<f64>, a: u8, raw_time: f64, event: bool, grid: &TimeGrid) -> Result<Self> {
        let (tau_tilde, delta) = match discretize_time(raw_time, grid)? {
            Discretized::Bin(k) => (k, event),
            Discretized::AdministrativeCensor => (grid.t_max(), false),
        };
        Ok(Self { x, a, tau_tilde, delta })
    }

    /// Long-format label `y(t)`.
    pub fn label(&self, t: usize) -> bool {
        self.delta && self.tau_tilde == t
    }

    pub fn at_risk(&self, t: usize) -> bool {
        self.tau_tilde >= t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    records: Vec<ShortRecord>,
    grid: TimeGrid,
}

impl Cohort {
    pub fn new(records: Vec<ShortRecord>, grid: TimeGrid) -> Result<Self> {
        let t_max = grid.t_max();
        if let Some(first) = records.first() {
            let d = first.x.len();
            for (i, r) in records.iter().enumerate() {
                if r.x.len() != d {
                    return Err(invalid(format!(
                        "record {i} has covariate dimension {}, expected {d}",
                        r.x.len()
                    )));
                }
                if r.a > 1 {
                    return Err(invalid(format!("record {i}: treatment must be 0 or 1")));
                }
                if r.tau_tilde == 0 || r.tau_tilde > t_max {
                    return Err(invalid(format!(
                        "record {i}: tau_tilde {} outside 1..={t_max}",
                        r.tau_tilde
                    )));
                }
            }
        }
        Ok(Self { records, grid })
    }

    pub fn records(&self) -> &[ShortRecord] {
        &self.records
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.x.len())
    }

    pub fn t_max(&self) -> usize {
        self.grid.t_max()
    }

    pub fn covariates(&self) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((self.len(), d));
        for (mut row, r) in out.rows_mut().into_iter().zip(&self.records) {
            row.assign(&ArrayView1::from(&r.x[..]));
        }
        out
    }

    pub fn treatments(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.a).collect()
    }

    pub fn arms_present(&self) -> [bool; 2] {
        let mut seen = [false; 2];
        for r in &self.records {
            seen[r.a as usize] = true;
        }
        seen
    }

    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            grid: self.grid.clone(),
        }
    }

    /// Reads the delimited ingestion format: `x_1..x_d, a, time, event`.
    pub fn read_csv<R: Read>(reader: R, grid: TimeGrid) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| invalid(format!("missing column {name:?}")))
        };
        let a_col = col("a")?;
        let time_col = col("time")?;
        let event_col = col("event")?;
        let x_cols = covariate_columns(&headers)?;

        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let field = |c: usize| -> Result<f64> {
                let s = row.get(c).unwrap_or("").trim();
                s.parse::<f64>()
                    .map_err(|_| invalid(format!("row {}: cannot parse {s:?}", line + 1)))
            };
            let x = x_cols.iter().map(|&c| field(c)).collect::<Result<Vec<_>>>()?;
            let a = parse_binary(field(a_col)?, "a", line)?;
            let event = parse_binary(field(event_col)?, "event", line)? == 1;
            records.push(ShortRecord::from_raw(x, a, field(time_col)?, event, &grid)?);
        }
        Self::new(records, grid)
    }

    pub fn read_csv_path(path: impl AsRef<Path>, grid: TimeGrid) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, grid)
    }

    /// Writes the ingestion format. Each bin is written as its midpoint so that
    /// re-ingestion with the same grid reproduces the cohort exactly.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("x_{j}")).collect();
        header.extend(["a", "time", "event"].map(String::from));
        w.write_record(&header)?;
        for r in &self.records {
            let mut fields: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
            fields.push(r.a.to_string());
            fields.push(self.grid.midpoint(r.tau_tilde).to_string());
            fields.push(u8::from(r.delta).to_string());
            w.write_record(&fields)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub(crate) fn covariate_columns(headers: &csv::StringRecord) -> Result<Vec<usize>> {
    let mut x_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(c, h)| {
            h.trim()
                .strip_prefix("x_")
                .and_then(|j| j.parse::<usize>().ok())
                .map(|j| (j, c))
        })
        .collect();
    x_cols.sort_unstable();
    if x_cols.is_empty() {
        return Err(invalid("no covariate columns x_1..x_d"));
    }
    if x_cols.iter().enumerate().any(|(k, &(j, _))| j != k + 1) {
        return Err(invalid("covariate columns must be x_1..x_d without gaps"));
    }
    Ok(x_cols.into_iter().map(|(_, c)| c).collect())
}

fn parse_binary(v: f64, name: &str, line: usize) -> Result<u8> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(invalid(format!("row {}: {name} must be 0 or 1, got {v}", line + 1)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LongInstance {
    pub subject: usize,
    pub t: usize,
    pub y: bool,
    pub a: u8,
}

pub fn to_long(cohort: &Cohort) -> Vec<LongInstance> {
    cohort
        .records()
        .iter()
        .enumerate()
        .flat_map(|(subject, r)| {
            (1..=r.tau_tilde).map(move |t| LongInstance {
                subject,
                t,
                y: r.label(t),
                a: r.a,
            })
        })
        .collect()
}

/// Indices of subjects in arm `a` still at risk at bin `t`.
pub fn at_risk(cohort: &Cohort, t: usize, a: u8) -> Result<Vec<usize>> {
    if t == 0 || t > cohort.t_max() {
        return Err(invalid(format!("bin {t} outside 1..={}", cohort.t_max())));
    }
    Ok(cohort
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.a == a && r.tau_tilde >= t)
        .map(|(i, _)| i)
        .collect())
}

pub fn survival_from_hazard(hazards: &[f64]) -> Result<Vec<f64>> {
    if let Some(h) = hazards.iter().find(|h| !(0.0..=1.0).contains(*h)) {
        return Err(invalid(format!("hazard {h} outside [0, 1]")));
    }
    let mut s = 1.0;
    Ok(hazards
        .iter()
        .map(|h| {
            s *= 1.0 - h;
            s
        })
        .collect())
}

/// Inverse of [`survival_from_hazard`]. Bins following a zero survival get hazard 1.
pub fn hazard_from_survival(survival: &[f64]) -> Result<Vec<f64>> {
    if let Some(s) = survival.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(invalid(format!("survival {s} outside [0, 1]")));
    }
    let mut prev = 1.0;
    Ok(survival
        .iter()
        .map(|&s| {
            let h = if prev > 0.0 { 1.0 - s / prev } else { 1.0 };
            prev = s;
            h
        })
        .collect())
}

/// `sum_{t_k <= L} S(t_k) (t_k - t_{k-1})`.
pub fn rmst_from_survival(curve: &[f64], horizon: f64, grid: &TimeGrid) -> Result<f64> {
    if curve.len() != grid.t_max() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} survival values", grid.t_max()),
            got: curve.len().to_string(),
        });
    }
    if horizon > grid.horizon() * (1.0 + 1e-12) {
        return Err(invalid(format!(
            "RMST horizon {horizon} beyond grid horizon {}",
            grid.horizon()
        )));
    }
    let tol = 1e-9 * grid.horizon();
    Ok((1..=grid.t_max())
        .take_while(|&t| grid.upper(t) <= horizon + tol)
        .map(|t| curve[t - 1] * grid.width(t))
        .sum())
}

/// Per-subject, per-arm, per-bin values; used for both hazards and survival.
#[derive(Clone, Debug, PartialEq)]
pub struct HazardSurface {
    /// `(subject, arm, t - 1)`
    pub values: Array3<f64>,
    pub grid: TimeGrid,
}

impl HazardSurface {
    pub fn zeros(n: usize, grid: TimeGrid) -> Self {
        let t_max = grid.t_max();
        Self {
            values: Array3::zeros((n, 2, t_max)),
            grid,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.values.dim().0
    }

    pub fn get(&self, subject: usize, arm: u8, t: usize) -> f64 {
        self.values[[subject, arm as usize, t - 1]]
    }

    pub fn set(&mut self, subject: usize, arm: u8, t: usize, v: f64) {
        self.values[[subject, arm as usize, t - 1]] = v;
    }

    pub fn curve(&self, subject: usize, arm: u8) -> Vec<f64> {
        self.values
            .slice(ndarray::s![subject, arm as usize, ..])
            .to_vec()
    }

    /// Converts every hazard curve into its survival curve.
    pub fn to_survival(&self) -> Result<SurvivalSurface> {
        let mut out = self.values.clone();
        for mut lane in out.lanes_mut(ndarray::Axis(2)) {
            let mut s = 1.0;
            for h in lane.iter_mut() {
                if !(0.0..=1.0).contains(h) {
                    return Err(invalid(format!("hazard {h} outside [0, 1]")));
                }
                s *= 1.0 - *h;
                *h = s;
            }
        }
        Ok(SurvivalSurface {
            values: out,
            grid: self.grid.clone(),
        })
    }
}

/// Survival probabilities `S^a(t | x_i)` with the same layout as [`HazardSurface`].
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalSurface {
    pub values: Array3<f64>,
    pub grid: TimeGrid,
}

impl SurvivalSurface {
    pub fn n_subjects(&self) -> usize {
        self.values.dim().0
    }

    pub fn get(&self, subject: usize, arm: u8, t: usize) -> f64 {
        self.values[[subject, arm as usize, t - 1]]
    }

    pub fn curve(&self, subject: usize, arm: u8) -> Vec<f64> {
        self.values
            .slice(ndarray::s![subject, arm as usize, ..])
            .to_vec()
    }

    /// `S^1(t|x_i) - S^0(t|x_i)` as an `(n, t_max)` array.
    pub fn hte_surv(&self) -> Array2<f64> {
        let s1 = self.values.index_axis(ndarray::Axis(1), 1);
        let s0 = self.values.index_axis(ndarray::Axis(1), 0);
        &s1 - &s0
    }

    /// Restricted-mean-survival difference per subject up to `horizon`.
    pub fn hte_rmst(&self, horizon: f64) -> Result<Vec<f64>> {
        (0..self.n_subjects())
            .map(|i| {
                let r1 = rmst_from_survival(&self.curve(i, 1), horizon, &self.grid)?;
                let r0 = rmst_from_survival(&self.curve(i, 0), horizon, &self.grid)?;
                Ok(r1 - r0)
            })
            .collect()
    }
}
