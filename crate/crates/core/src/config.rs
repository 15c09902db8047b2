//! Run configuration: one JSON document covering data, model, optimizer and
//! paths. Unknown keys are errors, and validation reports every offending
//! key at once.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::synth::SynthConfig;

/// `git describe`-style version, fixed at build time.
pub const VERSION: &str = env!("VDFORMER_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 200,
            val: 30,
            test: 30,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Center slices drawn from every volume per epoch.
    pub slices_per_volume: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            slices_per_volume: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory written by `gen` and read by `train` / `eval`.
    pub data_dir: PathBuf,
    /// Checkpoints, logs and reports.
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Dotted paths of keys in `given` that `known` has no slot for.
fn unknown_keys(given: &Value, known: &Value, path: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(k)) = (given, known) {
        for (key, v) in g {
            let p = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
            match k.get(key) {
                Some(kv) => unknown_keys(v, kv, &p, out),
                None => out.push(format!("{p}: unknown key")),
            }
        }
    }
}

impl RunConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if let Err(Error::Validation(v)) = self.data.synth.validate() {
            bad.extend(v.into_iter().map(|m| format!("data.{m}")));
        }
        if self.data.train == 0 {
            bad.push("data.train: need at least one training volume".into());
        }
        bad.extend(self.model.problems());
        bad.extend(self.optimizer.problems());
        if self.train.slices_per_volume == 0 || self.train.slices_per_volume > self.data.synth.depth {
            bad.push(format!(
                "train.slices_per_volume: must be in 1..={}, got {}",
                self.data.synth.depth, self.train.slices_per_volume
            ));
        }
        let g = self.model.backbone.granularity();
        let (h, w) = (self.data.synth.height, self.data.synth.width);
        if h % g != 0 || w % g != 0 || h < 2 * g || w < 2 * g {
            bad.push(format!(
                "data.synth.height/width: {h}x{w} must be multiples of {g} and at least {}",
                2 * g
            ));
        }
        for (k, p) in [("paths.data_dir", &self.paths.data_dir), ("paths.run_dir", &self.paths.run_dir)] {
            if p.as_os_str().is_empty() {
                bad.push(format!("{k}: must not be empty"));
            }
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    /// Parses and validates. Missing keys are errors too: a config file is
    /// a complete record of the run.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &serde_json::to_value(RunConfig::default())?, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Validation(unknown));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::format(origin, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
