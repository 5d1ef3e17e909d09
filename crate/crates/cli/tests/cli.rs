use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use statrs::distribution::{ContinuousCDF, StudentsT};
use tempfile::TempDir;

const SMALL: &str = r#"
replications = 2
test_n = 200
beta_selection = false
[data]
scenario = "S3"
n = 300
[train]
epochs = 2
batch_size = 64
architecture = { phi_widths = [8], head_widths = [4] }
"#;

fn survite(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_survite"))
        .env_remove("SURVITE_OUTPUT_ROOT")
        .arg("--output-root")
        .arg(root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap().trim().to_string()
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

/// Relative path to content for every file below `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.deserialize().map(|r| r.unwrap()).collect()
}

#[test]
fn s1_default_has_5000_untreated_subjects() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "s1.toml", "[data]\nscenario = \"S1\"\n");
    let data = PathBuf::from(ok(&survite(tmp.path(), &["generate", "-c", &cfg, "--replications", "1"])));
    let rows = csv_rows(&data.join("rep_0/train.csv"));
    assert_eq!(rows.len(), 5000);
    assert!(rows.iter().all(|r| r["a"] == "0"));
    let subject = csv_rows(&data.join("rep_0/oracle_train_subject.csv"));
    assert!(subject.iter().all(|r| r["propensity"] == "0"));
}

#[test]
fn generation_is_byte_identical_and_replications_differ() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "c.toml", &SMALL.replace("replications = 2", "replications = 5"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let da = PathBuf::from(ok(&survite(&a, &["generate", "-c", &cfg])));
    let db = PathBuf::from(ok(&survite(&b, &["generate", "-c", &cfg])));
    assert_eq!(da.file_name(), db.file_name());
    assert_eq!(tree(&da), tree(&db));

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(da.join("manifest.json")).unwrap()).unwrap();
    let seeds = manifest["seeds"].as_array().unwrap();
    assert_eq!(seeds.len(), 5);
    let mut train_seeds: Vec<u64> = seeds.iter().map(|s| s["train_data"].as_u64().unwrap()).collect();
    train_seeds.sort_unstable();
    train_seeds.dedup();
    assert_eq!(train_seeds.len(), 5);
    let cohorts: Vec<Vec<u8>> = (0..5)
        .map(|k| fs::read(da.join(format!("rep_{k}/train.csv"))).unwrap())
        .collect();
    for i in 0..5 {
        for j in 0..i {
            assert_ne!(cohorts[i], cohorts[j]);
        }
    }
}

#[test]
fn beta_zero_matches_the_no_ipm_ablation_and_training_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let text = format!(
        "methods = [\"survite\", \"survite_no_ipm\", \"lr_sep\"]\n{}",
        SMALL.replace("epochs = 2", "epochs = 2\nbeta = 0.0")
    );
    let cfg = write_config(&tmp, "c.toml", &text);
    let mut runs = Vec::new();
    for root in ["a", "b"] {
        let root = tmp.path().join(root);
        ok(&survite(&root, &["generate", "-c", &cfg]));
        runs.push(PathBuf::from(ok(&survite(&root, &["train", "-c", &cfg]))));
    }
    let run = &runs[0];
    for rep in 0..2 {
        for file in ["log.jsonl", "model.json"] {
            let ite = fs::read(run.join(format!("models/survite/rep_{rep}/{file}"))).unwrap();
            let ablation = fs::read(run.join(format!("models/survite_no_ipm/rep_{rep}/{file}"))).unwrap();
            assert_eq!(ite, ablation, "{file} rep {rep}");
        }
    }
    // one checkpoint per (method, replication)
    for m in ["survite", "survite_no_ipm", "lr_sep"] {
        for rep in 0..2 {
            assert!(run.join(format!("models/{m}/rep_{rep}/model.json")).exists());
        }
    }
    let strip = |t: BTreeMap<PathBuf, Vec<u8>>| -> BTreeMap<PathBuf, Vec<u8>> {
        t.into_iter().filter(|(p, _)| !p.ends_with("timing.jsonl")).collect()
    };
    assert_eq!(strip(tree(&runs[0])), strip(tree(&runs[1])));
}

#[test]
fn evaluation_scores_oracle_at_zero_and_aggregates_with_t_intervals() {
    let tmp = TempDir::new().unwrap();
    let text = format!(
        "methods = [\"lr_sep\", \"oracle\"]\n{}",
        SMALL.replace("replications = 2", "replications = 5")
    );
    let cfg = write_config(&tmp, "c.toml", &text);
    ok(&survite(tmp.path(), &["generate", "-c", &cfg]));
    ok(&survite(tmp.path(), &["train", "-c", &cfg]));
    let run = PathBuf::from(ok(&survite(tmp.path(), &["evaluate", "-c", &cfg])));

    let summary_path = run.join("summary.csv");
    let summary = csv_rows(&summary_path);
    let oracle: Vec<_> = summary.iter().filter(|r| r["method"] == "oracle").collect();
    assert!(!oracle.is_empty());
    for r in oracle.iter().filter(|r| r["metric"].starts_with("rmse")) {
        assert_eq!(r["mean"].parse::<f64>().unwrap(), 0.0, "{r:?}");
    }
    assert!(oracle.iter().any(|r| r["metric"] == "rmse_hte_rmst"));

    // CI half-width = t_{0.975,4} sd / sqrt(5), recomputed from the per-replication files
    let row = summary
        .iter()
        .find(|r| r["method"] == "lr_sep" && r["metric"] == "rmse_survival" && r["arm"] == "1" && r["t"] == "10")
        .unwrap();
    let values: Vec<f64> = (0..5)
        .map(|k| {
            csv_rows(&run.join(format!("metrics/lr_sep/rep_{k}.csv")))
                .into_iter()
                .find(|r| r["metric"] == "rmse_survival" && r["arm"] == "1" && r["t"] == "10")
                .unwrap()["value"]
                .parse()
                .unwrap()
        })
        .collect();
    let mean = values.iter().sum::<f64>() / 5.0;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    let q = StudentsT::new(0.0, 1.0, 4.0).unwrap().inverse_cdf(0.975);
    assert!((q - 2.776_445).abs() < 1e-6);
    let ci: f64 = row["ci95"].parse().unwrap();
    assert!((ci - q * sd / 5f64.sqrt()).abs() < 1e-12 * (1.0 + ci), "{ci}");
    assert_eq!(row["n_reps"], "5");

    // the table re-ingests through its schema and re-emits unchanged
    let mut rdr = csv::Reader::from_path(&summary_path).unwrap();
    let parsed: Vec<SummaryRow> = rdr.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(parsed.len(), summary.len());
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in &parsed {
        wtr.serialize(r).unwrap();
    }
    let again = String::from_utf8(wtr.into_inner().unwrap()).unwrap();
    assert_eq!(again, fs::read_to_string(&summary_path).unwrap());
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SummaryRow {
    method: String,
    metric: String,
    arm: Option<u8>,
    t: Option<usize>,
    horizon: Option<f64>,
    mean: f64,
    sd: f64,
    ci95: f64,
    n_reps: usize,
}

#[test]
fn missing_checkpoints_are_listed_and_skipped() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "c.toml", &format!("methods = [\"lr_sep\", \"oracle\"]\n{SMALL}"));
    ok(&survite(tmp.path(), &["generate", "-c", &cfg]));
    let out = survite(tmp.path(), &["evaluate", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lr_sep rep 0") && err.contains("lr_sep rep 1"), "{err}");
    let run = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert!(run.join("metrics/oracle/rep_1.csv").exists());
    assert!(!run.join("metrics/lr_sep").exists());
    let summary = csv_rows(&run.join("summary.csv"));
    assert!(summary.iter().all(|r| r["method"] == "oracle"));
}

#[test]
fn divergence_is_recorded_and_other_jobs_finish() {
    let tmp = TempDir::new().unwrap();
    let text = format!(
        "methods = [\"survite_no_ipm\", \"lr_sep\"]\n{}",
        SMALL.replace("epochs = 2", "epochs = 2\nlr = 1e300")
    );
    let cfg = write_config(&tmp, "c.toml", &text);
    ok(&survite(tmp.path(), &["generate", "-c", &cfg]));
    let out = survite(tmp.path(), &["train", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let run = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    let status: serde_json::Value =
        serde_json::from_slice(&fs::read(run.join("models/survite_no_ipm/rep_0/status.json")).unwrap()).unwrap();
    assert_eq!(status["ok"], false);
    assert!(status["error"].as_str().unwrap().contains("diverged"), "{status}");
    assert!(run.join("models/lr_sep/rep_1/model.json").exists());
}

#[test]
fn configuration_and_io_errors_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let bad = write_config(&tmp, "bad.toml", "[train]\nepoch = 3\n");
    assert_eq!(survite(tmp.path(), &["generate", "-c", &bad]).status.code(), Some(1));
    let cfg = write_config(&tmp, "c.toml", SMALL);
    let file_root = tmp.path().join("not_a_dir");
    fs::write(&file_root, b"x").unwrap();
    assert_eq!(survite(&file_root, &["generate", "-c", &cfg]).status.code(), Some(1));
    // training without cohorts
    assert_eq!(survite(tmp.path(), &["train", "-c", &cfg]).status.code(), Some(1));
}

#[test]
fn sweep_covers_the_grid_and_agrees_with_selection() {
    let tmp = TempDir::new().unwrap();
    let grid = [0.5, 0.05, 0.0];
    let text = format!(
        "methods = [\"survite\"]\n{}",
        SMALL
            .replace("beta_selection = false", "beta_selection = true")
            .replace("epochs = 2", "epochs = 2\nbeta_candidates = [0.5, 0.05, 0.0]\nbeta_tolerance = 0.05")
    );
    let cfg = write_config(&tmp, "c.toml", &text);
    ok(&survite(tmp.path(), &["generate", "-c", &cfg]));
    let run = PathBuf::from(ok(&survite(tmp.path(), &["sweep-beta", "-c", &cfg])));
    let sweep = run.join("sweep/survite");
    let validation = csv_rows(&sweep.join("validation.csv"));
    for rep in 0..2 {
        let betas: Vec<f64> = validation
            .iter()
            .filter(|r| r["replication"] == rep.to_string())
            .map(|r| r["beta"].parse().unwrap())
            .collect();
        assert_eq!(betas, grid);
    }
    let summary = csv_rows(&sweep.join("summary.csv"));
    let mut betas: Vec<String> = summary.iter().map(|r| r["beta"].clone()).collect();
    betas.dedup();
    assert_eq!(betas.len(), grid.len());

    ok(&survite(tmp.path(), &["train", "-c", &cfg]));
    let selection = csv_rows(&sweep.join("selection.csv"));
    assert_eq!(selection.len(), 2);
    for (rep, sel) in selection.iter().enumerate() {
        let status: serde_json::Value =
            serde_json::from_slice(&fs::read(run.join(format!("models/survite/rep_{rep}/status.json"))).unwrap())
                .unwrap();
        let chosen: f64 = sel["chosen_beta"].parse().unwrap();
        assert_eq!(status["beta"].as_f64().unwrap(), chosen, "rep {rep}");
    }
}

#[test]
fn single_candidate_sweep_matches_train_then_evaluate() {
    let tmp = TempDir::new().unwrap();
    let text = format!(
        "methods = [\"survite\"]\n{}",
        SMALL
            .replace("beta_selection = false", "beta_selection = true")
            .replace("epochs = 2", "epochs = 2\nbeta_candidates = [0.1]")
    );
    let cfg = write_config(&tmp, "c.toml", &text);
    ok(&survite(tmp.path(), &["generate", "-c", &cfg]));
    let run = PathBuf::from(ok(&survite(tmp.path(), &["sweep-beta", "-c", &cfg])));
    ok(&survite(tmp.path(), &["train", "-c", &cfg]));
    ok(&survite(tmp.path(), &["evaluate", "-c", &cfg]));
    let sweep = csv_rows(&run.join("sweep/survite/metrics.csv"));
    for rep in 0..2 {
        let eval = csv_rows(&run.join(format!("metrics/survite/rep_{rep}.csv")));
        let swept: Vec<_> = sweep.iter().filter(|r| r["replication"] == rep.to_string()).collect();
        assert_eq!(eval.len(), swept.len());
        for (e, s) in eval.iter().zip(swept) {
            for k in ["metric", "arm", "t", "horizon", "value"] {
                assert_eq!(e[k], s[k], "rep {rep} {k}");
            }
        }
    }
}
