use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{parse_domain_list, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::ProtocolConfig;
use crate::model::{LoraConfig, ModelConfig};
use crate::training::TrainConfig;

/// What `eval` computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Gallery domain against each query domain.
    Protocol,
    /// Rank-1 for every ordered pair of domains.
    Matrix,
    /// Re-fused features from region subsets.
    Ablation,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "protocol" => Ok(EvalMode::Protocol),
            "matrix" => Ok(EvalMode::Matrix),
            "ablation" => Ok(EvalMode::Ablation),
            other => Err(Error::config(format!(
                "unknown eval mode `{other}` (expected protocol, matrix or ablation)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub mode: EvalMode,
    pub batch_size: usize,
    /// Adds a global-only row to the ablation table.
    pub global_only_row: bool,
    /// Evaluate the test split right after training.
    pub after_train: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            mode: EvalMode::Protocol,
            batch_size: 32,
            global_only_row: false,
            after_train: true,
        }
    }
}

/// Declarative description of one run. Every section has defaults, so a
/// config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds data generation, initialisation, sampling and adapters.
    pub seed: u64,
    /// Manifest used by `train` and `eval`.
    pub data: Option<PathBuf>,
    pub synth: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub eval: EvalSettings,
}


impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(s)?;
        cfg.propagate_seed();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialise config: {e}")))
    }

    /// Copies the global seed into every seeded section.
    pub fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.train.batch.seed = self.seed;
        if let Some(l) = &mut self.train.lora {
            l.seed = self.seed;
        }
    }

    /// Overrides one dotted key, e.g. `train.learning_rate=0.001`. The value
    /// is read as a TOML literal and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got `{assignment}`")))?;
        let key = key.trim();
        let value = parse_literal(raw.trim());
        let mut root = toml::Value::try_from(&*self)
            .map_err(|e| Error::config(format!("cannot serialise config: {e}")))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("`{key}`: `{part}` is not inside a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let seed_changed = key == "seed";
        let updated: Self = root
            .try_into()
            .map_err(|e| Error::config(format!("`{key}`: {e}")))?;
        *self = updated;
        if seed_changed {
            self.propagate_seed();
        }
        Ok(())
    }

    pub fn set_domains(&mut self, list: &str) -> Result<()> {
        self.train.domains = parse_domain_list(list)?;
        Ok(())
    }

    /// `domain-aware` or `random`.
    pub fn set_sampler(&mut self, name: &str) -> Result<()> {
        self.train.batch.domain_aware = match name {
            "domain-aware" => true,
            "random" => false,
            other => {
                return Err(Error::config(format!(
                    "unknown sampler `{other}` (expected domain-aware or random)"
                )))
            }
        };
        Ok(())
    }

    /// Parses `rank=8,alpha=16` (either key optional) and enables adapters.
    pub fn set_lora(&mut self, spec: &str) -> Result<()> {
        let mut lora = LoraConfig {
            seed: self.seed,
            ..Default::default()
        };
        for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("LoRA option `{part}` is not key=value")))?;
            let bad = |e: &dyn std::fmt::Display| Error::config(format!("LoRA {k}: {e}"));
            match k.trim() {
                "rank" => lora.rank = v.trim().parse().map_err(|e| bad(&e))?,
                "alpha" => lora.alpha = v.trim().parse().map_err(|e| bad(&e))?,
                other => return Err(Error::config(format!("unknown LoRA option `{other}`"))),
            }
        }
        self.train.lora = Some(lora);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.protocol.validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size must be positive"));
        }
        Ok(())
    }

    /// Small model and training schedule used for the synthetic end-to-end
    /// run: 20 train and 10 test subjects, 5 epochs.
    pub fn smoke() -> Self {
        let mut cfg = Self {
            seed: 7,
            synth: SyntheticConfig {
                n_subjects: 30,
                test_subjects: Some(10),
                images_per_subject_per_domain: 4,
                ..Default::default()
            },
            model: ModelConfig::compact(384, 128, 16, 64, 2, 4, 20),
            train: TrainConfig {
                epochs: 5,
                learning_rate: 2e-3,
                warmup_steps: 5,
                margin: 0.5,
                batch: crate::training::BatchSpec {
                    p: 2,
                    k: 4,
                    domain_aware: true,
                    seed: 0,
                },
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.propagate_seed();
        cfg
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    toml::from_str::<Probe>(&format!("v = {raw}"))
        .map(|p| p.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}
