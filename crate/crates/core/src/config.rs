//! Top-level JSON configuration with dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{config_err, Error, Result};
use crate::eval::EvalConfig;
use crate::model::{ModelConfig, SiamModel};
use crate::synth::SynthSpec;
use crate::tracking::TrackingConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub tracking: TrackingConfig,
    /// Template for generated sequences.
    pub synth: SynthSpec,
    pub eval: EvalConfig,
    pub threads: usize,
}

impl Default for AppConfig {
    /// The desk-scale setup: reduced-width branch, desk training regimen.
    fn default() -> Self {
        AppConfig {
            model: ModelConfig::toy(),
            training: TrainConfig::default(),
            tracking: TrackingConfig::default(),
            synth: SynthSpec::default(),
            eval: EvalConfig::default(),
            threads: 1,
        }
    }
}

impl AppConfig {
    /// Full widths and training regimen.
    pub fn full() -> Self {
        AppConfig {
            model: ModelConfig::default(),
            training: TrainConfig::full(),
            ..Self::default()
        }
    }

    /// Toy branch without dropout, the short training recipe, and a
    /// penalty on scale changes.
    pub fn quick() -> Self {
        let mut model = ModelConfig::toy();
        model.backbone.dropout = 0.0;
        AppConfig {
            model,
            training: TrainConfig::quick(),
            tracking: TrackingConfig {
                scale_penalty: 0.9745,
                ..TrackingConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: AppConfig = serde_json::from_str(text).map_err(|e| config_err!("{origin}: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        SiamModel::new(self.model.clone())?;
        self.training.validate()?;
        self.tracking.validate()?;
        self.synth.validate()?;
        self.eval.validate()?;
        if self.threads == 0 {
            return Err(config_err!("threads must be >= 1"));
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides in order. Every path must name an
    /// existing key; values are parsed as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = self.to_value();
        for o in overrides {
            apply_override(&mut v, o.as_ref())?;
        }
        let cfg: AppConfig =
            serde_json::from_value(v).map_err(|e| config_err!("after overrides: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err!("override `{spec}` is not of the form key.path=value"))?;
    let mut node = root;
    let mut walked = Vec::new();
    for key in path.split('.') {
        walked.push(key);
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(key))
            .ok_or_else(|| config_err!("override `{spec}`: no config key `{}`", walked.join(".")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
