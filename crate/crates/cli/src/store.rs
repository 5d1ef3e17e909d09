//! On-disk layout, manifests and ground-truth tables.
//!
//! ```text
//! <root>/data-<data hash>/manifest.json
//!                         rep_<k>/{train,test}.csv
//!                         rep_<k>/oracle_{train,test}.csv          subject, arm, t, hazard, survival, censor_hazard
//!                         rep_<k>/oracle_{train,test}_subject.csv  subject, propensity, hte_rmst_<L>...
//! <root>/run-<config hash>/manifest.json
//!                          models/<method>/rep_<k>/{model.json, log.jsonl, timing.jsonl, beta.csv, status.json}
//!                          metrics/<method>/rep_<k>.csv
//!                          summary.csv
//!                          sweep/<method>/...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use survite_core::dgp::OracleTruth;
use survite_core::survdata::{Cohort, HazardSurface, TimeGrid};

use crate::config::{Method, RepSeeds, RunConfig};

pub const MANIFEST_FORMAT: &str = "survite-run-v1";

#[derive(Clone, Debug)]
pub struct Layout {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Layout {
    pub fn new(root: &Path, cfg: &RunConfig) -> Self {
        let root = cfg.output_dir.as_deref().unwrap_or(root);
        Self {
            data_dir: root.join(format!("data-{}", cfg.data_hash())),
            run_dir: root.join(format!("run-{}", cfg.config_hash())),
        }
    }

    pub fn rep_data(&self, rep: usize) -> PathBuf {
        self.data_dir.join(format!("rep_{rep}"))
    }

    pub fn model_dir(&self, method: Method, rep: usize) -> PathBuf {
        self.run_dir.join("models").join(method.name()).join(format!("rep_{rep}"))
    }

    pub fn metrics_file(&self, method: Method, rep: usize) -> PathBuf {
        self.run_dir.join("metrics").join(method.name()).join(format!("rep_{rep}.csv"))
    }

    pub fn sweep_dir(&self, method: Method) -> PathBuf {
        self.run_dir.join("sweep").join(method.name())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'a str,
    config_hash: String,
    data_hash: String,
    config: &'a RunConfig,
    seeds: Vec<RepSeeds>,
    versions: Versions,
}

#[derive(Serialize)]
struct Versions {
    survite: &'static str,
    checkpoint: &'static str,
}

/// Writes the same manifest into both run directories. The content depends only
/// on the configuration, so any command may (re)write it.
pub fn write_manifests(layout: &Layout, cfg: &RunConfig) -> Result<()> {
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        config_hash: cfg.config_hash(),
        data_hash: cfg.data_hash(),
        config: cfg,
        seeds: (0..cfg.replications).map(|k| cfg.seeds(k)).collect(),
        versions: Versions {
            survite: env!("CARGO_PKG_VERSION"),
            checkpoint: "survite-model-v1",
        },
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    for dir in [&layout.data_dir, &layout.run_dir] {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_bytes(&dir.join("manifest.json"), &bytes)?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r)?;
    }
    write_bytes(path, &wtr.into_inner().context("flushing csv")?)
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<T>, _>>();
    rows.with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize, Deserialize)]
struct OracleRow {
    subject: usize,
    arm: u8,
    t: usize,
    hazard: f64,
    survival: f64,
    censor_hazard: f64,
}

pub fn split_name(test: bool) -> &'static str {
    if test {
        "test"
    } else {
        "train"
    }
}

pub fn write_split(dir: &Path, test: bool, cohort: &Cohort, oracle: &OracleTruth, horizons: &[f64]) -> Result<()> {
    let name = split_name(test);
    let mut buf = Vec::new();
    cohort.write_csv(&mut buf)?;
    write_bytes(&dir.join(format!("{name}.csv")), &buf)?;

    let t_max = cohort.t_max();
    let mut rows = Vec::with_capacity(cohort.len() * 2 * t_max);
    for i in 0..cohort.len() {
        for arm in 0..2u8 {
            for t in 1..=t_max {
                rows.push(OracleRow {
                    subject: i,
                    arm,
                    t,
                    hazard: oracle.event_hazard.get(i, arm, t),
                    survival: oracle.survival.get(i, arm, t),
                    censor_hazard: oracle.censor_hazard[[i, t - 1]],
                });
            }
        }
    }
    write_csv(&dir.join(format!("oracle_{name}.csv")), &rows)?;

    let rmst = horizons
        .iter()
        .map(|&h| oracle.hte_rmst_at(h))
        .collect::<survite_core::Result<Vec<_>>>()?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["subject".to_string(), "propensity".to_string()];
    header.extend(horizons.iter().map(|h| format!("hte_rmst_{h}")));
    wtr.write_record(&header)?;
    for i in 0..cohort.len() {
        let mut rec = vec![i.to_string(), oracle.propensity[i].to_string()];
        rec.extend(rmst.iter().map(|v| v[i].to_string()));
        wtr.write_record(&rec)?;
    }
    write_bytes(
        &dir.join(format!("oracle_{name}_subject.csv")),
        &wtr.into_inner().context("flushing csv")?,
    )
}

pub fn read_cohort(dir: &Path, test: bool, grid: TimeGrid) -> Result<Cohort> {
    let path = dir.join(format!("{}.csv", split_name(test)));
    if !path.exists() {
        bail!("missing cohort {}; run `survite generate` with the same configuration", path.display());
    }
    Ok(Cohort::read_csv_path(&path, grid)?)
}

/// Rebuilds the ground truth from its tables; survival and RMST are recomputed from the hazards.
pub fn read_oracle(dir: &Path, test: bool, n: usize, grid: TimeGrid, horizons: &[f64]) -> Result<OracleTruth> {
    let name = split_name(test);
    let t_max = grid.t_max();
    let rows: Vec<OracleRow> = read_csv(&dir.join(format!("oracle_{name}.csv")))?;
    if rows.len() != n * 2 * t_max {
        bail!("oracle_{name}.csv has {} rows, expected {}", rows.len(), n * 2 * t_max);
    }
    let mut hazard = HazardSurface::zeros(n, grid);
    let mut censor = Array2::zeros((n, t_max));
    for r in rows {
        if r.subject >= n || r.arm > 1 || r.t == 0 || r.t > t_max {
            bail!("oracle_{name}.csv row out of range: subject {} arm {} t {}", r.subject, r.arm, r.t);
        }
        hazard.set(r.subject, r.arm, r.t, r.hazard);
        censor[[r.subject, r.t - 1]] = r.censor_hazard;
    }
    let mut rdr = csv::Reader::from_path(dir.join(format!("oracle_{name}_subject.csv")))?;
    let mut propensity = vec![0.0; n];
    for rec in rdr.records() {
        let rec = rec?;
        let i: usize = rec.get(0).context("subject column")?.parse()?;
        if i >= n {
            bail!("oracle_{name}_subject.csv subject {i} out of range");
        }
        propensity[i] = rec.get(1).context("propensity column")?.parse()?;
    }
    Ok(OracleTruth::from_hazards(hazard, censor, propensity, horizons)?)
}

/// Outcome of one `(method, replication)` job, written next to its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub method: Method,
    pub replication: usize,
    pub ok: bool,
    pub error: Option<String>,
    pub best_epoch: Option<usize>,
    pub beta: Option<f64>,
    /// A last-good checkpoint was kept after divergence.
    pub last_good: bool,
}
