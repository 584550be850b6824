//! Run configuration: per-experiment defaults, JSON loading and validation.
//!
//! A user config is deep-merged over the defaults of its experiment and then
//! parsed strictly. Every error points at the line of the offending key.

use std::fmt;
use std::path::{Path, PathBuf};

use cpfas_core::datasets::{DoubleWellParams, ExperimentName, MarginalParams, TwoCirclesParams, VehicleParams};
use cpfas_core::nn::Optimizer;
use cpfas_core::smoother::Resampling;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Smooth,
    Train,
    Sample,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Generate, Stage::Smooth, Stage::Train, Stage::Sample, Stage::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Smooth => "smooth",
            Stage::Train => "train",
            Stage::Sample => "sample",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Against {
    Observations,
    Truth,
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    /// Relative paths resolve against `CPFAS_OUTPUT_ROOT`, or the working
    /// directory when it is unset.
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgressConfig {
    pub enabled: bool,
    /// Report every `interval` chain iterations.
    pub interval: usize,
}

/// Replaces the likelihood parameters of the slot at `time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotOverride {
    pub time: f64,
    #[serde(default)]
    pub sigma_obs: Option<f64>,
    #[serde(default)]
    pub neighbors: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationsConfig {
    pub overrides: Vec<SlotOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmootherConfig {
    pub n_particles: usize,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub n_chains: usize,
    pub resampling: Resampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub width: usize,
    pub depth: usize,
    pub n_freqs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub against: Vec<Against>,
    /// Cap on the points per side of an EMD; larger sets are subsampled.
    pub max_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentName,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub io: IoConfig,
    /// Worker threads; `null` uses every hardware thread.
    pub workers: Option<usize>,
    pub progress: ProgressConfig,
    /// Generator parameters of the experiment.
    pub data: Value,
    pub observations: ObservationsConfig,
    pub smoother: SmootherConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
}

/// Typed generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum DataParams {
    DoubleWell(DoubleWellParams),
    TwoCircles(TwoCirclesParams),
    Vehicle(VehicleParams),
    Marginal(MarginalParams),
}

impl DataParams {
    pub fn defaults(exp: ExperimentName) -> Self {
        match exp {
            ExperimentName::DoubleWell => DataParams::DoubleWell(DoubleWellParams::default()),
            ExperimentName::TwoCircles => DataParams::TwoCircles(TwoCirclesParams::default()),
            ExperimentName::VehicleSynthetic => DataParams::Vehicle(VehicleParams::default()),
            ExperimentName::MarginalTransport => DataParams::Marginal(MarginalParams::default()),
        }
    }

    fn to_value(&self) -> Value {
        match self {
            DataParams::DoubleWell(p) => serde_json::to_value(p),
            DataParams::TwoCircles(p) => serde_json::to_value(p),
            DataParams::Vehicle(p) => serde_json::to_value(p),
            DataParams::Marginal(p) => serde_json::to_value(p),
        }
        .expect("generator parameters serialize")
    }
}

/// Defaults for one experiment, as JSON so they can be merged with a user
/// document before strict parsing.
pub fn default_config(exp: ExperimentName) -> Value {
    // (N, M, burn-in, chains, lr, batch, epochs, n_paths, eval target)
    let (n, m, burn, chains, lr, batch, epochs, n_paths, against) = match exp {
        ExperimentName::DoubleWell => (100, 1000, 500, 1, 1e-4, 2048, 200, 200, "observations"),
        ExperimentName::TwoCircles => (1000, 2000, 1000, 10, 1e-4, 1024, 200, 1000, "terminal"),
        ExperimentName::VehicleSynthetic => (1000, 400, 200, 1, 1e-4, 2048, 300, 1000, "truth"),
        ExperimentName::MarginalTransport => (500, 500, 250, 8, 1e-4, 2048, 200, 500, "observations"),
    };
    json!({
        "experiment": exp.as_str(),
        "seed": 0,
        "stages": ["generate", "smooth", "train", "sample", "eval"],
        "io": { "out_dir": format!("runs/{}", exp.as_str()) },
        "workers": null,
        "progress": { "enabled": true, "interval": 100 },
        "data": DataParams::defaults(exp).to_value(),
        "observations": { "overrides": [] },
        "smoother": {
            "n_particles": n,
            "n_iterations": m,
            "burn_in": burn,
            "n_chains": chains,
            "resampling": "multinomial",
        },
        "network": { "width": 128, "depth": 4, "n_freqs": 16 },
        "training": {
            "learning_rate": lr,
            "batch_size": batch,
            "epochs": epochs,
            "optimizer": serde_json::to_value(Optimizer::default()).expect("optimizer serializes"),
        },
        "sampling": { "n_paths": n_paths },
        "eval": { "against": [against], "max_points": cpfas_core::metrics::DEFAULT_MAX_POINTS },
    })
}

/// Objects merge key by key; anything else in `over` replaces `base`.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// A config error anchored to a line of the source document.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub source: String,
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.source, self.line, self.msg)
    }
}

impl std::error::Error for ConfigError {}

/// 1-based line of the key at `path` (object keys only), searching each
/// segment after the previous one. Falls back to the deepest key found, or
/// line 1.
pub fn locate(text: &str, path: &[&str]) -> usize {
    let mut pos = 0;
    let mut line = 1;
    for seg in path {
        let needle = format!("\"{seg}\"");
        match text[pos..].find(&needle) {
            Some(off) => {
                pos += off;
                line = text[..pos].matches('\n').count() + 1;
                pos += needle.len();
            }
            None => break,
        }
    }
    line
}

/// A validated configuration and where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub data: DataParams,
    /// Directory of the config file; relative data paths resolve here.
    pub base_dir: PathBuf,
    pub source: String,
    pub text: String,
}

impl LoadedConfig {
    pub fn error(&self, path: &[&str], msg: impl Into<String>) -> ConfigError {
        ConfigError { source: self.source.clone(), line: locate(&self.text, path), msg: msg.into() }
    }

    /// sha256 of the canonical config without the fields that do not change
    /// results (`io`, `workers`, `progress`, `stages`).
    pub fn hash(&self) -> String {
        config_hash(&self.run)
    }
}

pub fn config_hash(run: &RunConfig) -> String {
    let mut v = serde_json::to_value(run).expect("config serializes");
    if let Value::Object(m) = &mut v {
        for k in ["io", "workers", "progress", "stages"] {
            m.remove(k);
        }
    }
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn serde_path(path: &serde_path_to_error::Path) -> Vec<String> {
    path.iter()
        .filter_map(|s| match s {
            serde_path_to_error::Segment::Map { key } => Some(key.clone()),
            _ => None,
        })
        .collect()
}

fn parse_typed<T: serde::de::DeserializeOwned>(
    value: Value,
    prefix: &[&str],
    source: &str,
    text: &str,
) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let mut path: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
        path.extend(serde_path(e.path()));
        // unknown-field errors name the key in backticks
        let inner = e.inner().to_string();
        if inner.starts_with("unknown field") {
            if let Some(k) = inner.split('`').nth(1) {
                if path.last().map(String::as_str) != Some(k) {
                    path.push(k.to_string());
                }
            }
        }
        let refs: Vec<&str> = path.iter().map(String::as_str).collect();
        let at = if refs.is_empty() { String::new() } else { format!("{}: ", refs.join(".")) };
        ConfigError { source: source.into(), line: locate(text, &refs), msg: format!("{at}{inner}") }
    })
}

/// Parse and validate a config document.
pub fn parse_config(text: &str, source: &str, base_dir: &Path) -> Result<LoadedConfig, ConfigError> {
    let err = |line: usize, msg: String| ConfigError { source: source.into(), line, msg };
    let user: Value = serde_json::from_str(text).map_err(|e| err(e.line().max(1), e.to_string()))?;
    let Value::Object(map) = &user else {
        return Err(err(1, "config must be a JSON object".into()));
    };
    let exp_value = map.get("experiment").ok_or_else(|| err(1, "missing required key \"experiment\"".into()))?;
    let exp: ExperimentName = exp_value
        .as_str()
        .ok_or_else(|| err(locate(text, &["experiment"]), "experiment must be a string".into()))?
        .parse()
        .map_err(|e: cpfas_core::Error| err(locate(text, &["experiment"]), e.to_string()))?;
    let mut merged = default_config(exp);
    merge(&mut merged, &user);
    let mut run: RunConfig = parse_typed(merged, &[], source, text)?;
    let data_value = run.data.clone();
    let data = match exp {
        ExperimentName::DoubleWell => DataParams::DoubleWell(parse_typed(data_value, &["data"], source, text)?),
        ExperimentName::TwoCircles => DataParams::TwoCircles(parse_typed(data_value, &["data"], source, text)?),
        ExperimentName::VehicleSynthetic => DataParams::Vehicle(parse_typed(data_value, &["data"], source, text)?),
        ExperimentName::MarginalTransport => DataParams::Marginal(parse_typed(data_value, &["data"], source, text)?),
    };
    // canonical form, so equivalent spellings hash the same
    run.data = data.to_value();
    let loaded = LoadedConfig { run, data, base_dir: base_dir.to_path_buf(), source: source.into(), text: text.into() };
    validate(&loaded)?;
    Ok(loaded)
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let source = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError { source: source.clone(), line: 1, msg: format!("cannot read config: {e}") })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &source, &base)
}

fn validate(c: &LoadedConfig) -> Result<(), ConfigError> {
    let r = &c.run;
    if r.stages.is_empty() {
        return Err(c.error(&["stages"], "stages must list at least one stage"));
    }
    if r.stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(c.error(
            &["stages"],
            "stages must be distinct and in pipeline order (generate, smooth, train, sample, eval)",
        ));
    }
    if r.workers == Some(0) {
        return Err(c.error(&["workers"], "workers must be >= 1 (or null for all hardware threads)"));
    }
    if r.progress.interval == 0 {
        return Err(c.error(&["progress", "interval"], "interval must be >= 1"));
    }
    let s = &r.smoother;
    for (key, v) in [("n_particles", s.n_particles), ("n_iterations", s.n_iterations), ("n_chains", s.n_chains)] {
        if v == 0 {
            return Err(c.error(&["smoother", key], format!("{key} must be >= 1")));
        }
    }
    if s.burn_in >= s.n_iterations {
        return Err(c.error(
            &["smoother", "burn_in"],
            format!("burn_in ({}) must be smaller than n_iterations ({})", s.burn_in, s.n_iterations),
        ));
    }
    let n = &r.network;
    for (key, v) in [("width", n.width), ("depth", n.depth), ("n_freqs", n.n_freqs)] {
        if v == 0 {
            return Err(c.error(&["network", key], format!("{key} must be >= 1")));
        }
    }
    let t = &r.training;
    if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
        return Err(c.error(&["training", "learning_rate"], format!("learning_rate {} must be finite and > 0", t.learning_rate)));
    }
    if t.batch_size == 0 {
        return Err(c.error(&["training", "batch_size"], "batch_size must be >= 1"));
    }
    if t.epochs == 0 {
        return Err(c.error(&["training", "epochs"], "epochs must be >= 1"));
    }
    if let Optimizer::Adam { beta1, beta2, eps } = t.optimizer {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(c.error(&["training", "optimizer"], "adam needs 0 <= beta1, beta2 < 1 and eps > 0"));
        }
    }
    if r.sampling.n_paths == 0 {
        return Err(c.error(&["sampling", "n_paths"], "n_paths must be >= 1"));
    }
    if r.eval.against.is_empty() {
        return Err(c.error(&["eval", "against"], "against must list at least one target"));
    }
    if r.eval.max_points == 0 {
        return Err(c.error(&["eval", "max_points"], "max_points must be >= 1"));
    }
    for (k, o) in r.observations.overrides.iter().enumerate() {
        let bad_sigma = o.sigma_obs.is_some_and(|s| !(s.is_finite() && s > 0.0));
        if bad_sigma || o.neighbors == Some(0) || !o.time.is_finite() {
            return Err(c.error(
                &["observations", "overrides"],
                format!("override {k}: needs a finite time, sigma_obs > 0 and neighbors >= 1"),
            ));
        }
    }
    Ok(())
}
