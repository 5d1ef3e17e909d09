//! Run configuration: a TOML file overlaid on per-scenario defaults, then flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use survite_core::dgp::{Scenario, SyntheticConfig, ToyConfig};
use survite_core::survdata::TimeGrid;
use survite_core::survite::{BalancingMode, TrainConfig};
use survite_core::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Survite,
    SurviteNoIpm,
    SurviteCfr1,
    SurviteCfr2,
    Survihe,
    LrSep,
    /// Ground truth evaluated as if it were a prediction; never trained.
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Survite => "survite",
            Method::SurviteNoIpm => "survite_no_ipm",
            Method::SurviteCfr1 => "survite_cfr1",
            Method::SurviteCfr2 => "survite_cfr2",
            Method::Survihe => "survihe",
            Method::LrSep => "lr_sep",
            Method::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let m = serde_json::from_value(Value::String(s.trim().to_ascii_lowercase()))
            .with_context(|| format!("unknown method {s:?}"))?;
        Ok(m)
    }

    pub fn trained(self) -> bool {
        self != Method::Oracle
    }

    /// Network methods and the training configuration they run with.
    pub fn train_config(self, base: &TrainConfig) -> Option<TrainConfig> {
        let (mode, single_arm) = match self {
            Method::Survite => (BalancingMode::Survite, false),
            Method::SurviteNoIpm => (BalancingMode::None, false),
            Method::SurviteCfr1 => (BalancingMode::Cfr1, false),
            Method::SurviteCfr2 => (BalancingMode::Cfr2, false),
            Method::Survihe => (BalancingMode::Survite, true),
            Method::LrSep | Method::Oracle => return None,
        };
        let mut cfg = base.clone();
        cfg.balancing_mode = mode;
        cfg.single_arm = single_arm;
        if mode == BalancingMode::None {
            cfg.beta = 0.0;
        }
        Some(cfg)
    }

    /// Whether this method picks beta on validation data when selection is on.
    pub fn selects_beta(self) -> bool {
        matches!(
            self,
            Method::Survite | Method::SurviteCfr1 | Method::SurviteCfr2 | Method::Survihe
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticConfig),
    Toy(ToyConfig),
}

impl DataConfig {
    pub fn grid(&self) -> Result<TimeGrid> {
        Ok(match self {
            DataConfig::Synthetic(c) => c.grid(),
            DataConfig::Toy(c) => TimeGrid::uniform(1.0, c.t_max)?,
        })
    }

    pub fn n(&self) -> usize {
        match self {
            DataConfig::Synthetic(c) => c.n,
            DataConfig::Toy(c) => c.n,
        }
    }

    pub fn set_n(&mut self, n: usize) {
        match self {
            DataConfig::Synthetic(c) => c.n = n,
            DataConfig::Toy(c) => c.n = n,
        }
    }

    /// Whether the data-generating process assigns treatment at all.
    pub fn two_arm(&self) -> bool {
        match self {
            DataConfig::Synthetic(c) => c.scenario.has_treatment() && c.zeta > 0.0,
            DataConfig::Toy(_) => false,
        }
    }

    pub fn label(&self) -> String {
        match self {
            DataConfig::Synthetic(c) => format!("{:?}", c.scenario),
            DataConfig::Toy(c) => format!("toy_{}", serde_json::to_value(c.variant).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()),
        }
    }
}

/// Fully resolved configuration. Its canonical JSON form is what gets hashed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub replications: usize,
    pub methods: Vec<Method>,
    /// RMST horizons `L` for the oracle tables and the RMST metrics.
    pub horizons: Vec<f64>,
    pub test_n: usize,
    /// Network methods with balancing choose beta from `train.beta_candidates`.
    pub beta_selection: bool,
    pub lr_sep_l2: f64,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn for_data(data: DataConfig) -> Self {
        let methods = if data.two_arm() {
            vec![Method::Survite, Method::SurviteNoIpm, Method::LrSep]
        } else {
            vec![Method::Survihe, Method::LrSep]
        };
        Self {
            seed: 0,
            replications: 5,
            methods,
            horizons: vec![10.0, 20.0],
            test_n: 5000,
            beta_selection: true,
            lr_sep_l2: survite_core::eval::DEFAULT_L2,
            data,
            train: TrainConfig::default(),
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            bail!("replications must be >= 1");
        }
        if self.methods.is_empty() {
            bail!("method list is empty");
        }
        if self.test_n == 0 {
            bail!("test_n must be >= 1");
        }
        if self.horizons.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            bail!("horizons must be positive, got {:?}", self.horizons);
        }
        if let DataConfig::Synthetic(c) = &self.data {
            c.validate()?;
        }
        self.train.validate()?;
        Ok(())
    }

    /// Hash of everything that determines the generated cohorts.
    pub fn data_hash(&self) -> String {
        #[derive(Serialize)]
        struct DataKey<'a> {
            seed: u64,
            replications: usize,
            test_n: usize,
            horizons: &'a [f64],
            data: &'a DataConfig,
        }
        hash_json(&DataKey {
            seed: self.seed,
            replications: self.replications,
            test_n: self.test_n,
            horizons: &self.horizons,
            data: &self.data,
        })
    }

    pub fn config_hash(&self) -> String {
        hash_json(self)
    }

    pub fn seeds(&self, rep: usize) -> RepSeeds {
        let k = rep as u64;
        RepSeeds {
            replication: rep,
            train_data: derive_seed(self.seed, k),
            test_data: derive_seed(self.seed, 1_000 + k),
            model: derive_seed(self.seed, 2_000 + k),
        }
    }

    /// Data config for one split of one replication.
    pub fn split_data(&self, rep: usize, test: bool) -> DataConfig {
        let seeds = self.seeds(rep);
        let mut data = self.data.clone();
        let (seed, n) = if test {
            (seeds.test_data, self.test_n)
        } else {
            (seeds.train_data, data.n())
        };
        match &mut data {
            DataConfig::Synthetic(c) => {
                c.seed = seed;
                c.rmst_horizons = self.horizons.clone();
            }
            DataConfig::Toy(c) => c.seed = seed,
        }
        data.set_n(n);
        data
    }

    pub fn train_for(&self, method: Method, rep: usize) -> Option<TrainConfig> {
        let mut cfg = method.train_config(&self.train)?;
        cfg.seed = self.seeds(rep).model;
        Some(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepSeeds {
    pub replication: usize,
    pub train_data: u64,
    pub test_data: u64,
    pub model: u64,
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialises");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

/// Command-line overrides applied after the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub methods: Option<Vec<Method>>,
    pub n: Option<usize>,
    pub test_n: Option<usize>,
    pub epochs: Option<usize>,
    pub beta_selection: Option<bool>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    replications: Option<usize>,
    methods: Option<Vec<String>>,
    horizons: Option<Vec<f64>>,
    test_n: Option<usize>,
    beta_selection: Option<bool>,
    lr_sep_l2: Option<f64>,
    output_dir: Option<PathBuf>,
    data: Option<toml::Table>,
    train: Option<toml::Table>,
}

pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = parse(&text)?;
    apply(&mut cfg, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let file: FileConfig = toml::from_str(text).context("parsing configuration")?;
    let data_table = file.data.unwrap_or_default();
    let data = resolve_data(&data_table)?;
    let mut cfg = RunConfig::for_data(data);
    if let Some(train) = &file.train {
        cfg.train = overlay(&cfg.train, train, "train")?;
    }
    if let Some(v) = file.seed {
        cfg.seed = v;
    }
    if let Some(v) = file.replications {
        cfg.replications = v;
    }
    if let Some(v) = file.methods {
        cfg.methods = v.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?;
    }
    if let Some(v) = file.horizons {
        cfg.horizons = v;
    }
    if let Some(v) = file.test_n {
        cfg.test_n = v;
    }
    if let Some(v) = file.beta_selection {
        cfg.beta_selection = v;
    }
    if let Some(v) = file.lr_sep_l2 {
        cfg.lr_sep_l2 = v;
    }
    cfg.output_dir = file.output_dir;
    Ok(cfg)
}

pub fn apply(cfg: &mut RunConfig, o: &Overrides) -> Result<()> {
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.replications {
        cfg.replications = v;
    }
    if let Some(v) = &o.methods {
        cfg.methods = v.clone();
    }
    if let Some(v) = o.n {
        cfg.data.set_n(v);
    }
    if let Some(v) = o.test_n {
        cfg.test_n = v;
    }
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.beta_selection {
        cfg.beta_selection = v;
    }
    if let Some(v) = &o.output_dir {
        cfg.output_dir = Some(v.clone());
    }
    Ok(())
}

fn resolve_data(table: &toml::Table) -> Result<DataConfig> {
    let kind = table.get("kind").and_then(|v| v.as_str()).unwrap_or("synthetic");
    let mut rest = table.clone();
    rest.remove("kind");
    match kind {
        "synthetic" => {
            let scenario: Scenario = match rest.get("scenario") {
                Some(v) => v
                    .as_str()
                    .context("data.scenario must be a string")?
                    .parse()?,
                None => Scenario::S3,
            };
            rest.remove("scenario");
            let base = SyntheticConfig::new(scenario);
            Ok(DataConfig::Synthetic(overlay(&base, &rest, "data")?))
        }
        "toy" => Ok(DataConfig::Toy(overlay(&ToyConfig::default(), &rest, "data")?)),
        other => bail!("unknown data kind {other:?}; expected \"synthetic\" or \"toy\""),
    }
}

/// Overlays user keys on `base`, recursing into nested tables and rejecting unknown keys.
fn overlay<T: Serialize + serde::de::DeserializeOwned>(
    base: &T,
    user: &toml::Table,
    section: &str,
) -> Result<T> {
    let mut merged = serde_json::to_value(base)?;
    let user = serde_json::to_value(user)?;
    merge(&mut merged, &user, section)?;
    serde_json::from_value(merged).with_context(|| format!("invalid [{section}] section"))
}

fn merge(base: &mut Value, user: &Value, path: &str) -> Result<()> {
    let (Value::Object(b), Value::Object(u)) = (&mut *base, user) else {
        *base = user.clone();
        return Ok(());
    };
    for (k, v) in u {
        let key = format!("{path}.{k}");
        match b.get_mut(k) {
            Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key)?,
            Some(slot) => *slot = v.clone(),
            None => bail!("unknown configuration key {key}"),
        }
    }
    Ok(())
}
