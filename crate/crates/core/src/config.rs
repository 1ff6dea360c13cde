//! Run configuration: training, loss and diffusion settings plus the
//! guidance mode, filled from a named preset and overridden by JSON.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::continual::TrainConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::inference::Guidance;
use crate::losses::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small network scale: minutes on one CPU core.
    Desk,
    /// The published fine-tuning and DDIM settings.
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::invalid(format!("unknown preset {s:?} (desk|paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub diffusion: DiffusionConfig,
    pub guidance: Guidance,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => RunConfig {
                preset,
                train: TrainConfig::default(),
                diffusion: DiffusionConfig::default(),
                guidance: Guidance::Retrieval,
            },
            Preset::Paper => RunConfig {
                preset,
                train: TrainConfig {
                    steps_per_task: 500,
                    learning_rate: 3e-5,
                    loss: LossConfig {
                        alpha: 0.8,
                        gamma: 1.0,
                        lambda_t: 10.0,
                        temperature: 4.0,
                    },
                    ..TrainConfig::default()
                },
                // 150 distinct sampling indices need at least 150 schedule
                // steps.
                diffusion: DiffusionConfig {
                    train_steps: 1000,
                    beta_start: 1e-4,
                    beta_end: 0.02,
                    invert_steps: 100,
                    sample_steps: 150,
                },
                guidance: Guidance::Retrieval,
            },
        }
    }

    /// Parses a JSON document: its `preset` (default `desk`) supplies every
    /// value, then the document's own keys replace them. Unknown keys are
    /// rejected.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::format("run config", e))?;
        let Value::Object(_) = doc else {
            return Err(Error::format("run config", "top level must be a JSON object"));
        };
        let preset = match doc.get("preset") {
            None => Preset::Desk,
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::format("run config", format!("preset must be a string, got {other}"))),
        };
        let mut merged = serde_json::to_value(RunConfig::preset(preset)).expect("config serializes");
        merge(&mut merged, doc);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::format("run config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json_str(&text).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(format!("run config {}", path.display()), detail),
            other => other,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.diffusion.build().map(|_| ())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
