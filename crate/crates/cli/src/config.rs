//! Run configuration: a TOML document with one table per concern.
//!
//! Any key can be overridden from the environment with `HOLOPROP_<TABLE>__<KEY>=<value>`,
//! for example `HOLOPROP_PATH__RADIUS=0.2` or `HOLOPROP_SEED=7`. Values are parsed as TOML
//! when possible and taken as strings otherwise.

use std::path::{Path, PathBuf};

use holoprop::experiments::{StabilityGrid, DEFAULT_SETTLED_TOL};
use holoprop::{Activation, EstimatorKind, LayerSpec, NetworkSpec, OnlineConfig, PhaseConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "HOLOPROP_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub network: NetworkConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub phases: PhaseConfig,
    #[serde(default)]
    pub path: PathConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub grad_check: GradCheckConfig,
    #[serde(default)]
    pub stability: StabilityConfig,
    #[serde(default)]
    pub orbit: OrbitConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub online: Option<OnlineCurveConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub activation: Activation,
    #[serde(default = "one")]
    pub tau: f64,
    #[serde(default = "one")]
    pub init_gain: f64,
    /// Defaults to the run seed.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

impl NetworkConfig {
    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec { input: self.input.clone(), layers: self.layers.clone(), activation: self.activation, tau: self.tau }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum DataConfig {
    /// Inline samples, one inner list per sample.
    Fixed { inputs: Vec<Vec<f64>>, labels: Vec<usize> },
    /// IDX files; `first`/`count` select the batch for gradient experiments, the last
    /// `validation` samples are held out, and `limit` caps the training part.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        first: usize,
        #[serde(default = "ten")]
        count: usize,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default = "ten_thousand")]
        validation: usize,
    },
    Synthetic {
        n: usize,
        classes: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "tenth")]
        val_fraction: f64,
    },
}

fn ten() -> usize {
    10
}
fn ten_thousand() -> usize {
    10_000
}
fn tenth() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub radius: f64,
    pub n_points: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self { radius: 0.1, n_points: 24 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Length of the unrolled free phase.
    pub steps: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { steps: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub estimators: Vec<EstimatorKind>,
    /// `beta` for classic EP; defaults to the path radius.
    pub classic_beta: Option<f64>,
    pub classic_realizations: usize,
    /// Also compare the adjoint with central differences on this many coordinates.
    pub fd_coordinates: usize,
    pub fd_step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            estimators: vec![EstimatorKind::Holomorphic, EstimatorKind::ClassicEp],
            classic_beta: None,
            classic_realizations: 1,
            fd_coordinates: 0,
            fd_step: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub grid: StabilityGrid,
    pub steps: usize,
    pub settled_tol: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self { grid: StabilityGrid::default(), steps: 200, settled_tol: DEFAULT_SETTLED_TOL }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitConfig {
    /// `[layer, unit]` pairs, 0-based.
    pub units: Vec<[usize; 2]>,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self { units: vec![[0, 0], [1, 0]] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxisName {
    Radius,
    NPoints,
    TOsc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxisName,
    pub values: Vec<f64>,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "ten")]
    pub periods: usize,
    #[serde(default = "t_osc")]
    pub t_osc: usize,
    #[serde(default)]
    pub classic_realizations: Option<usize>,
}

fn t_osc() -> usize {
    400
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineCurveConfig {
    pub t_osc: Vec<usize>,
    pub periods: usize,
    pub radius: f64,
    #[serde(default = "yes")]
    pub settle_first: bool,
}

impl OnlineCurveConfig {
    pub fn online(&self, t_osc: usize) -> OnlineConfig {
        OnlineConfig { t_osc, t_plas: t_osc * self.periods, radius: self.radius, settle_first: self.settle_first, off_boundary: false }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the training `eval_steps`, then 200.
    pub steps: Option<usize>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn set_path(table: &mut toml::Table, keys: &[String], value: toml::Value) -> Result<(), ConfigError> {
    let (last, parents) = keys.split_last().ok_or_else(|| ConfigError("empty override key".into()))?;
    let mut t = table;
    for k in parents {
        t = t
            .entry(k.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("override {k} is not a table")))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `HOLOPROP_A__B=v` pairs to the document.
pub fn apply_overrides(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (k, v) in vars {
        let keys: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if keys.iter().any(|s| s.is_empty()) {
            return Err(ConfigError(format!("malformed override {k}")));
        }
        set_path(table, &keys, parse_value(&v))?;
    }
    Ok(())
}

pub fn parse(text: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig, ConfigError> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
    apply_overrides(&mut table, vars)?;
    if let Some(train) = table.get("train").and_then(|t| t.as_table()) {
        for key in ["phases", "seed", "init_gain"] {
            if train.contains_key(key) {
                return Err(ConfigError(format!("train.{key} is taken from the top level; set it there")));
            }
        }
    }
    let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
    cfg.validate()?;
    cfg.sync_train();
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    parse(&text, std::env::vars()).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let net = holoprop::Network::new(self.network.spec()).map_err(|e| ConfigError(e.to_string()))?;
        holoprop::NudgePath::new(self.path.radius, self.path.n_points).map_err(|e| ConfigError(e.to_string()))?;
        if let Some(t) = &self.train {
            t.validate(net.depth()).map_err(ConfigError)?;
        }
        if let Some(o) = &self.online {
            for &t in &o.t_osc {
                o.online(t).validate().map_err(|e| ConfigError(e.to_string()))?;
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() || s.estimators.is_empty() {
                return Err(ConfigError("sweep needs values and estimators".into()));
            }
        }
        if let DataConfig::Fixed { inputs, labels } = &self.data {
            let dim: usize = self.network.input.iter().product();
            if inputs.len() != labels.len() || inputs.iter().any(|v| v.len() != dim) {
                return Err(ConfigError(format!("fixed data needs one {dim}-value input per label")));
            }
        }
        if self.stability.grid.resolution < 2 || self.stability.steps == 0 {
            return Err(ConfigError("stability grid needs resolution >= 2 and steps >= 1".into()));
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        self.network.init_seed.unwrap_or(self.seed)
    }

    /// Phase settings with the run seed driving the noise streams.
    pub fn phases(&self) -> PhaseConfig {
        PhaseConfig { rng_seed: self.seed, ..self.phases }
    }

    /// Copies the run seed, init gain and phases into the training settings.
    pub fn sync_train(&mut self) {
        let (seed, gain, phases) = (self.init_seed(), self.network.init_gain, self.phases());
        if let Some(t) = &mut self.train {
            t.seed = seed;
            t.init_gain = gain;
            t.phases = phases;
        }
    }

    /// The resolved document; reloading it gives the same config.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        if let Some(train) = table.get_mut("train").and_then(|t| t.as_table_mut()) {
            for key in ["phases", "seed", "init_gain"] {
                train.remove(key);
            }
        }
        toml::to_string(&table).expect("config serializes")
    }
}
