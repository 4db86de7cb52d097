//! Run configuration and the provenance record written next to every output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degrade::DegradationRanges;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{LossConfig, TrainConfig, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::eval::AuthThresholds;
use crate::extrinsic::ExtrinsicConfig;
use crate::schedule::ScheduleConfig;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Number of sampling steps.
    #[serde(rename = "K")]
    pub steps: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS }
    }
}

/// Every tunable of a run. Missing keys take defaults; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub degrade: DegradationRanges,
    pub infer: InferConfig,
    pub extrinsic: ExtrinsicConfig,
    pub authenticity: AuthThresholds,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.degrade.validate()?;
        if self.loss.target != self.model.prediction_target {
            return Err(Error::Config(format!(
                "loss.target {:?} differs from model.prediction_target {:?}",
                self.loss.target, self.model.prediction_target
            )));
        }
        if self.infer.steps == 0 || self.infer.steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "infer.K must lie in 1..={}, got {}",
                self.schedule.steps, self.infer.steps
            )));
        }
        Ok(())
    }

    /// The fully expanded configuration as pretty JSON.
    pub fn resolved_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// What a run needs to be replayed: command line, seed, configuration,
/// tool version and checksums of every input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub command: Vec<String>,
    pub seed: u64,
    /// Input path → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

impl RunRecord {
    pub fn new(command: Vec<String>, seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            command,
            seed,
            inputs: BTreeMap::new(),
            config,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let sum = crate::extrinsic::sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), sum);
        Ok(())
    }

    /// Writes `run.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::eval::write_json(&dir.join("run.json"), self)
    }
}
