//! Experiment configuration: one JSON record per run, parsed fail-closed
//! (unknown keys are errors). Dotted-path `--set` flags override fields
//! after the file is read; `AUXNAS_SEED` overrides the seed last.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use auxnas::error::{Error, Result};
use auxnas::evalbench::Method;
use auxnas::taskgen::{CsvSchema, FamilyConfig};
use auxnas::trainer::{LambdaSchedule, OptimConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Single,
    Symmetric,
    AuxHead,
    AuxGStage,
    AuxGLayer,
    AuxNas,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Symmetric => "symmetric",
            Mode::AuxHead => "aux_head",
            Mode::AuxGStage => "aux_g_stage",
            Mode::AuxGLayer => "aux_g_layer",
            Mode::AuxNas => "aux_nas",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub n_layers: usize,
    pub width: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Layers per stage for aux_g_stage granularity.
    #[serde(default = "default_stage")]
    pub stage: usize,
}

fn default_window() -> usize {
    3
}

fn default_stage() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub family: FamilyConfig,
    pub n_samples: usize,
    /// Seed of the frozen teacher; independent of the run seed so the same
    /// task family can be re-sampled across runs.
    #[serde(default)]
    pub family_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub path: PathBuf,
    pub schema: CsvSchema,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSection {
    Synthetic(SyntheticData),
    Csv(CsvData),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub freeze_alpha_p: bool,
    /// Record wall time per step. Off by default so step CSVs are
    /// byte-reproducible.
    pub timing: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            optim: t.optim,
            lambda_start: t.schedule.start,
            lambda_end: t.schedule.end,
            freeze_alpha_p: false,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub net: NetSection,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub seed: u64,
    /// Protocol only; empty means "just `seed`".
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Protocol only; empty means all methods.
    #[serde(default)]
    pub methods: Vec<Method>,
    /// Optional cross-check against the task list (auxiliary task count).
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed,
            optim: self.train.optim.clone(),
            schedule: LambdaSchedule {
                start: self.train.lambda_start,
                end: self.train.lambda_end,
            },
            freeze_alpha_p: self.train.freeze_alpha_p,
            timing: self.train.timing,
        }
    }

    /// Number of tasks declared by the data source (primary + auxiliaries).
    pub fn task_count(&self) -> usize {
        match &self.data {
            DataSection::Synthetic(s) => s.family.tasks.len(),
            DataSection::Csv(c) => c.schema.tasks.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_count() == 0 {
            return Err(Error::config("data source declares no tasks"));
        }
        if let Some(k) = self.k {
            let declared = self.task_count() - 1;
            if k != declared {
                return Err(Error::config(format!(
                    "k = {k} but the data source declares {declared} auxiliary task(s)"
                )));
            }
        }
        let aux = self.task_count() - 1;
        match self.mode {
            Mode::Single => {}
            _ if aux == 0 => {
                return Err(Error::config(format!(
                    "mode {} needs at least one auxiliary task",
                    self.mode.name()
                )));
            }
            _ => {}
        }
        if self.mode == Mode::AuxGStage {
            if self.net.stage == 0 || self.net.n_layers % self.net.stage != 0 {
                return Err(Error::config(format!(
                    "stage = {} must divide n_layers = {}",
                    self.net.stage, self.net.n_layers
                )));
            }
        }
        if let DataSection::Csv(c) = &self.data {
            if !c.path.exists() {
                return Err(Error::config(format!("csv path {:?} does not exist", c.path)));
            }
        }
        Ok(())
    }
}

/// Apply one `path.to.field=value` override to the raw JSON tree. The value
/// is parsed as JSON when possible, otherwise taken as a string.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("--set {spec:?}: expected PATH=VALUE")))?;
    if path.is_empty() {
        return Err(Error::config(format!("--set {spec:?}: empty path")));
    }
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(Error::config(format!(
                "--set {spec:?}: {} is not an object",
                parts[..i].join(".")
            )));
        }
        let map = cur.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!()
}

/// Read, override, env-patch, and validate a config file.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {path:?}: {e}")))?;
    let mut raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("config {path:?}: {e}")))?;
    for spec in overrides {
        apply_override(&mut raw, spec)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(raw)
        .map_err(|e| Error::config(format!("config {path:?}: {e}")))?;
    if let Ok(seed) = std::env::var("AUXNAS_SEED") {
        cfg.seed = seed
            .parse()
            .map_err(|_| Error::config(format!("AUXNAS_SEED {seed:?} is not a u64")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}
