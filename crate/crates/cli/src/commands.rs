use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use survite_core::dgp::{self, OracleTruth, Scenario, SyntheticConfig, ToyConfig, ToyVariant};
use survite_core::eval::{evaluate as evaluate_metrics, fit_lr_sep, LRSepModel, MetricReport, MetricRow, Provenance};
use survite_core::survdata::Cohort;
use survite_core::survite::{
    choose_beta, predict, select_beta, sweep_beta_with, train_with, EpochRecord, PredictionBundle,
    SurvITEModel, TrainObserver,
};
use survite_core::Error as CoreError;

use crate::config::{hash_json, DataConfig, Method, Overrides, RunConfig};
use crate::store::{self, JobStatus, Layout};
use crate::summary::{aggregate, SummaryRow};

const LR_SEP_FORMAT: &str = "survite-lr-sep-v1";

/// Replications that failed or were skipped; empty means full success.
#[derive(Debug, Default)]
pub struct Outcome {
    pub problems: Vec<String>,
}

impl Outcome {
    fn extend(&mut self, other: Outcome) {
        self.problems.extend(other.problems);
    }
}

fn sample(data: &DataConfig) -> survite_core::Result<(Cohort, OracleTruth)> {
    match data {
        DataConfig::Synthetic(c) => dgp::generate(c),
        DataConfig::Toy(c) => dgp::toy_generate(c),
    }
}

pub fn generate(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    store::write_manifests(layout, cfg)?;
    (0..cfg.replications).into_par_iter().try_for_each(|rep| {
        let dir = layout.rep_data(rep);
        for test in [false, true] {
            let (cohort, oracle) = sample(&cfg.split_data(rep, test))?;
            store::write_split(&dir, test, &cohort, &oracle, &cfg.horizons)?;
        }
        eprintln!("generated replication {rep} in {}", dir.display());
        anyhow::Ok(())
    })?;
    Ok(Outcome::default())
}

fn require_data(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    for rep in 0..cfg.replications {
        let dir = layout.rep_data(rep);
        if !dir.join("train.csv").exists() || !dir.join("test.csv").exists() {
            bail!(
                "no cohorts in {}; run `survite generate` with the same configuration first",
                dir.display()
            );
        }
    }
    Ok(())
}

/// Keeps the most recent improved model so divergence still leaves a checkpoint.
#[derive(Default)]
struct LastGood {
    model: Option<SurvITEModel>,
}

impl TrainObserver for LastGood {
    fn on_improvement(&mut self, model: &SurvITEModel, _epoch: usize) -> survite_core::Result<()> {
        self.model = Some(model.clone());
        Ok(())
    }
}

#[derive(Serialize)]
struct Timing {
    epoch: usize,
    wall_time_s: f64,
}

#[derive(Serialize, Deserialize)]
struct LrSepCheckpoint {
    format: String,
    config_hash: String,
    model: LRSepModel,
}

/// Training log without wall times, so it is reproducible byte for byte.
fn write_logs(dir: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut trajectory = Vec::with_capacity(log.len());
    let mut timing = Vec::with_capacity(log.len());
    for r in log {
        let mut v = serde_json::to_value(r)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_time_s");
        }
        trajectory.push(v);
        timing.push(Timing {
            epoch: r.epoch,
            wall_time_s: r.wall_time_s,
        });
    }
    store::write_jsonl(&dir.join("log.jsonl"), &trajectory)?;
    store::write_jsonl(&dir.join("timing.jsonl"), &timing)
}

/// Treated subjects are dropped for single-arm training.
fn training_cohort(method: Method, cohort: Cohort) -> Cohort {
    if method == Method::Survihe && cohort.arms_present()[1] {
        let control: Vec<usize> = (0..cohort.len()).filter(|&i| cohort.records()[i].a == 0).collect();
        cohort.subset(&control)
    } else {
        cohort
    }
}

fn train_job(cfg: &RunConfig, layout: &Layout, method: Method, rep: usize) -> JobStatus {
    let dir = layout.model_dir(method, rep);
    let mut status = JobStatus {
        method,
        replication: rep,
        ok: false,
        error: None,
        best_epoch: None,
        beta: None,
        last_good: false,
    };
    let started = Instant::now();
    if let Err(e) = run_train_job(cfg, &layout.rep_data(rep), &dir, method, rep, &mut status) {
        status.error = Some(format!("{e:#}"));
    } else {
        status.ok = true;
    }
    eprintln!(
        "{} rep {rep}: {} after {:.1}s",
        method.name(),
        if status.ok { "done" } else { "FAILED" },
        started.elapsed().as_secs_f64()
    );
    status
}

fn run_train_job(
    cfg: &RunConfig,
    data_dir: &Path,
    dir: &Path,
    method: Method,
    rep: usize,
    status: &mut JobStatus,
) -> Result<()> {
    let cohort = store::read_cohort(data_dir, false, cfg.data.grid()?)?;
    std::fs::create_dir_all(dir)?;
    let hash = cfg.config_hash();
    let Some(tcfg) = cfg.train_for(method, rep) else {
        let model = fit_lr_sep(&cohort, cfg.lr_sep_l2)?;
        let ck = LrSepCheckpoint {
            format: LR_SEP_FORMAT.into(),
            config_hash: hash,
            model,
        };
        return store::write_bytes(&dir.join("model.json"), &serde_json::to_vec(&ck)?);
    };
    let cohort = training_cohort(method, cohort);
    let trained = if cfg.beta_selection && method.selects_beta() {
        let sel = select_beta(&cohort, &tcfg, &tcfg.beta_candidates)?;
        store::write_csv(&dir.join("beta.csv"), &sel.reports)?;
        status.beta = Some(sel.chosen);
        sel.model
    } else {
        let mut observer = LastGood::default();
        match train_with(&cohort, &tcfg, &mut observer) {
            Ok(t) => {
                status.beta = Some(tcfg.beta);
                t
            }
            Err(e @ CoreError::TrainingDiverged { .. }) => {
                if let Some(m) = observer.model {
                    m.save_json(dir.join("last_good.json"), &hash)?;
                    status.last_good = true;
                }
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
    };
    status.best_epoch = Some(trained.best_epoch);
    trained.model.save_json(dir.join("model.json"), &hash)?;
    write_logs(dir, &trained.log)
}

fn jobs(cfg: &RunConfig, trained_only: bool) -> Vec<(Method, usize)> {
    cfg.methods
        .iter()
        .filter(|m| !trained_only || m.trained())
        .flat_map(|&m| (0..cfg.replications).map(move |r| (m, r)))
        .collect()
}

pub fn train(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    store::write_manifests(layout, cfg)?;
    require_data(cfg, layout)?;
    let statuses: Vec<JobStatus> = jobs(cfg, true)
        .into_par_iter()
        .map(|(m, r)| train_job(cfg, layout, m, r))
        .collect();
    let mut outcome = Outcome::default();
    for s in &statuses {
        let dir = layout.model_dir(s.method, s.replication);
        store::write_bytes(&dir.join("status.json"), &serde_json::to_vec_pretty(s)?)?;
        if let Some(err) = &s.error {
            outcome
                .problems
                .push(format!("train {} rep {}: {err}", s.method.name(), s.replication));
        }
    }
    Ok(outcome)
}

fn predict_method(
    cfg: &RunConfig,
    layout: &Layout,
    method: Method,
    rep: usize,
    cohort: &Cohort,
    oracle: &OracleTruth,
) -> Result<PredictionBundle> {
    let x = cohort.covariates();
    if method == Method::Oracle {
        return Ok(PredictionBundle::from_hazard(
            oracle.event_hazard.clone(),
            &cfg.horizons,
            cfg.data.two_arm(),
        )?);
    }
    let path = layout.model_dir(method, rep).join("model.json");
    if !path.exists() {
        bail!("missing checkpoint {}", path.display());
    }
    let hash = cfg.config_hash();
    if method == Method::LrSep {
        let bytes = std::fs::read(&path)?;
        let ck: LrSepCheckpoint = serde_json::from_slice(&bytes).context("reading LR-sep checkpoint")?;
        if ck.format != LR_SEP_FORMAT || ck.config_hash != hash {
            bail!("checkpoint {} does not belong to this configuration", path.display());
        }
        return Ok(ck.model.predict(x.view(), &cfg.horizons)?);
    }
    let (model, ck_hash) = SurvITEModel::load_json(&path)?;
    if ck_hash != hash {
        bail!("checkpoint {} does not belong to this configuration", path.display());
    }
    Ok(predict(&model, x.view(), &cfg.horizons)?)
}

struct TestSplit {
    cohort: Cohort,
    oracle: OracleTruth,
}

fn load_test(cfg: &RunConfig, layout: &Layout, rep: usize) -> Result<TestSplit> {
    let dir = layout.rep_data(rep);
    let grid = cfg.data.grid()?;
    let cohort = store::read_cohort(&dir, true, grid.clone())?;
    let oracle = store::read_oracle(&dir, true, cohort.len(), grid, &cfg.horizons)?;
    Ok(TestSplit { cohort, oracle })
}

fn provenance(cfg: &RunConfig, rep: usize, n: usize) -> Provenance {
    Provenance {
        seed: cfg.seeds(rep).test_data,
        config_hash: cfg.config_hash(),
        n,
    }
}

pub fn evaluate(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    store::write_manifests(layout, cfg)?;
    let problems = Mutex::new(Vec::new());
    let tests: Vec<Option<TestSplit>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| match load_test(cfg, layout, rep) {
            Ok(t) => Some(t),
            Err(e) => {
                problems.lock().unwrap().push(format!("evaluate rep {rep}: {e:#}"));
                None
            }
        })
        .collect();
    jobs(cfg, false).into_par_iter().for_each(|(method, rep)| {
        let Some(split) = &tests[rep] else { return };
        let res = predict_method(cfg, layout, method, rep, &split.cohort, &split.oracle).and_then(|pred| {
            let prov = provenance(cfg, rep, split.cohort.len());
            let report = evaluate_metrics(&pred, &split.oracle, &split.cohort, &cfg.horizons, &prov)?;
            store::write_csv(&layout.metrics_file(method, rep), &report.rows)
        });
        if let Err(e) = res {
            problems
                .lock()
                .unwrap()
                .push(format!("evaluate {} rep {rep}: {e:#} (skipped)", method.name()));
        }
    });
    let mut summary = Vec::new();
    for &method in &cfg.methods {
        let reps: Vec<Vec<MetricRow>> = (0..cfg.replications)
            .map(|rep| layout.metrics_file(method, rep))
            .filter(|p| p.exists())
            .map(|p| Ok(MetricReport::read_csv_path(&p)?.rows))
            .collect::<Result<_>>()?;
        summary.extend(aggregate(method.name(), &reps));
    }
    store::write_csv(&layout.run_dir.join("summary.csv"), &summary)?;
    let mut problems = problems.into_inner().unwrap();
    problems.sort();
    Ok(Outcome { problems })
}

/// Validation result of one candidate in one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepValidationRow {
    pub replication: usize,
    pub beta: f64,
    pub val_c_index: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMetricRow {
    pub replication: usize,
    pub beta: f64,
    pub metric: String,
    pub arm: Option<u8>,
    pub t: Option<usize>,
    pub horizon: Option<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub beta: f64,
    pub metric: String,
    pub arm: Option<u8>,
    pub t: Option<usize>,
    pub horizon: Option<f64>,
    pub mean: f64,
    pub sd: f64,
    pub ci95: f64,
    pub n_reps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSelectionRow {
    pub replication: usize,
    pub chosen_beta: Option<f64>,
}

/// The selection rule applied to a sweep's validation table.
pub fn choose_from_table(rows: &[SweepValidationRow], tolerance: f64) -> Option<f64> {
    let scores: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| (r.beta, r.val_c_index.unwrap_or(f64::NAN)))
        .collect();
    choose_beta(&scores, tolerance).or_else(|| scores.iter().map(|s| s.0).reduce(f64::max))
}

pub fn sweep_beta(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    store::write_manifests(layout, cfg)?;
    require_data(cfg, layout)?;
    let mut methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.selects_beta()).collect();
    if methods.is_empty() {
        methods.push(if cfg.data.two_arm() { Method::Survite } else { Method::Survihe });
    }
    let mut outcome = Outcome::default();
    let grid = cfg.data.grid()?;
    for method in methods {
        let mut validation = Vec::new();
        let mut metrics = Vec::new();
        let mut selection = Vec::new();
        for rep in 0..cfg.replications {
            let tcfg = cfg.train_for(method, rep).expect("network method");
            let candidates = tcfg.beta_candidates.clone();
            let cohort = store::read_cohort(&layout.rep_data(rep), false, grid.clone())?;
            let cohort = training_cohort(method, cohort);
            let test = load_test(cfg, layout, rep)?;
            let started = Instant::now();
            let runs = match sweep_beta_with(&cohort, &tcfg, &candidates, |_, _| {}) {
                Ok(r) => r,
                Err(e) => {
                    outcome.problems.push(format!("sweep {} rep {rep}: {e}", method.name()));
                    continue;
                }
            };
            let prov = provenance(cfg, rep, test.cohort.len());
            let mut rep_rows = Vec::new();
            for run in runs {
                if let Some(err) = &run.report.error {
                    outcome.problems.push(format!(
                        "sweep {} rep {rep} beta {}: {err}",
                        method.name(),
                        run.report.beta
                    ));
                }
                if let Some(tm) = &run.model {
                    let pred = predict(&tm.model, test.cohort.covariates().view(), &cfg.horizons)?;
                    let report = evaluate_metrics(&pred, &test.oracle, &test.cohort, &cfg.horizons, &prov)?;
                    metrics.extend(report.rows.iter().map(|r| SweepMetricRow {
                        replication: rep,
                        beta: run.report.beta,
                        metric: r.metric.clone(),
                        arm: r.arm,
                        t: r.t,
                        horizon: r.horizon,
                        value: r.value,
                    }));
                }
                rep_rows.push(SweepValidationRow {
                    replication: rep,
                    beta: run.report.beta,
                    val_c_index: run.report.c_index,
                    error: run.report.error,
                });
            }
            selection.push(SweepSelectionRow {
                replication: rep,
                chosen_beta: choose_from_table(&rep_rows, tcfg.beta_tolerance),
            });
            validation.extend(rep_rows);
            eprintln!(
                "sweep {} rep {rep}: {} candidates in {:.1}s",
                method.name(),
                candidates.len(),
                started.elapsed().as_secs_f64()
            );
        }
        let dir = layout.sweep_dir(method);
        store::write_csv(&dir.join("validation.csv"), &validation)?;
        store::write_csv(&dir.join("metrics.csv"), &metrics)?;
        store::write_csv(&dir.join("selection.csv"), &selection)?;
        store::write_csv(&dir.join("summary.csv"), &summarise_sweep(&metrics, cfg.replications))?;
    }
    Ok(outcome)
}

fn summarise_sweep(metrics: &[SweepMetricRow], replications: usize) -> Vec<SweepSummaryRow> {
    let mut betas: Vec<f64> = Vec::new();
    for r in metrics {
        if !betas.contains(&r.beta) {
            betas.push(r.beta);
        }
    }
    let mut out = Vec::new();
    for beta in betas {
        let reps: Vec<Vec<MetricRow>> = (0..replications)
            .map(|rep| {
                metrics
                    .iter()
                    .filter(|r| r.beta == beta && r.replication == rep)
                    .map(|r| MetricRow {
                        metric: r.metric.clone(),
                        arm: r.arm,
                        t: r.t,
                        horizon: r.horizon,
                        value: r.value,
                        n: 0,
                        seed: 0,
                        config_hash: String::new(),
                    })
                    .collect()
            })
            .collect();
        out.extend(aggregate("", &reps).into_iter().map(|s| SweepSummaryRow {
            beta,
            metric: s.metric,
            arm: s.arm,
            t: s.t,
            horizon: s.horizon,
            mean: s.mean,
            sd: s.sd,
            ci95: s.ci95,
            n_reps: s.n_reps,
        }));
    }
    out
}

#[derive(Serialize)]
struct ReproduceIndexRow {
    dataset: String,
    data_dir: String,
    run_dir: String,
    problems: usize,
}

#[derive(Serialize)]
struct ReproduceSummaryRow<'a> {
    dataset: &'a str,
    method: &'a str,
    metric: &'a str,
    arm: Option<u8>,
    t: Option<usize>,
    horizon: Option<f64>,
    mean: f64,
    sd: f64,
    ci95: f64,
    n_reps: usize,
}

/// Datasets and methods of the full pipeline.
pub fn reproduce_plan() -> Vec<(DataConfig, Vec<Method>)> {
    let two_arm = vec![
        Method::Survite,
        Method::SurviteNoIpm,
        Method::SurviteCfr1,
        Method::SurviteCfr2,
        Method::LrSep,
        Method::Oracle,
    ];
    let one_arm = vec![Method::Survihe, Method::LrSep, Method::Oracle];
    let mut plan: Vec<(DataConfig, Vec<Method>)> = [Scenario::S1, Scenario::S2, Scenario::S3, Scenario::S4]
        .into_iter()
        .map(|s| {
            let methods = if s.has_treatment() { two_arm.clone() } else { one_arm.clone() };
            (DataConfig::Synthetic(SyntheticConfig::new(s)), methods)
        })
        .collect();
    for variant in [ToyVariant::WellSpecified, ToyVariant::Misspecified] {
        plan.push((
            DataConfig::Toy(ToyConfig {
                variant,
                ..ToyConfig::default()
            }),
            vec![Method::LrSep, Method::Oracle],
        ));
    }
    plan
}

pub fn reproduce(base: &RunConfig, overrides: &Overrides, root: &Path) -> Result<Outcome> {
    let overrides = Overrides {
        methods: None,
        ..overrides.clone()
    };
    let out_dir = base
        .output_dir
        .as_deref()
        .unwrap_or(root)
        .join(format!("reproduce-{}", hash_json(base)));
    let mut outcome = Outcome::default();
    let mut index = Vec::new();
    let mut summary: Vec<(String, Vec<SummaryRow>)> = Vec::new();
    for (data, methods) in reproduce_plan() {
        let mut cfg = RunConfig {
            data,
            methods,
            ..base.clone()
        };
        crate::config::apply(&mut cfg, &overrides)?;
        if let DataConfig::Toy(t) = &cfg.data {
            // the toy horizon is shorter than the synthetic one
            cfg.horizons.retain(|&h| h <= t.t_max as f64);
        }
        cfg.validate()?;
        let layout = Layout::new(root, &cfg);
        let label = cfg.data.label();
        eprintln!("== {label}: {}", layout.run_dir.display());
        let mut part = generate(&cfg, &layout)?;
        part.extend(train(&cfg, &layout)?);
        part.extend(evaluate(&cfg, &layout)?);
        index.push(ReproduceIndexRow {
            dataset: label.clone(),
            data_dir: layout.data_dir.display().to_string(),
            run_dir: layout.run_dir.display().to_string(),
            problems: part.problems.len(),
        });
        summary.push((label, store::read_csv(&layout.run_dir.join("summary.csv"))?));
        outcome.extend(part);
    }
    store::write_csv(&out_dir.join("index.csv"), &index)?;
    let rows: Vec<ReproduceSummaryRow> = summary
        .iter()
        .flat_map(|(d, rows)| {
            rows.iter().map(move |r| ReproduceSummaryRow {
                dataset: d,
                method: &r.method,
                metric: &r.metric,
                arm: r.arm,
                t: r.t,
                horizon: r.horizon,
                mean: r.mean,
                sd: r.sd,
                ci95: r.ci95,
                n_reps: r.n_reps,
            })
        })
        .collect();
    store::write_csv(&out_dir.join("summary.csv"), &rows)?;
    println!("{}", out_dir.display());
    Ok(outcome)
}
