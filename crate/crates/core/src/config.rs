//! Run configuration: one TOML document plus `key.path=value` overrides.
//! Precedence is overrides, then file, then defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curriculum::{CleanConfig, DepthConfig, FdmConfig, JointConfig, PretrainConfig, RunContext};
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::fogsim::DatasetConfig;
use crate::nets::ArchConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Training seed. The dataset has its own seed under `data`.
    pub seed: u64,
    pub data: DatasetConfig,
    pub arch: ArchConfig,
    pub clean: CleanConfig,
    pub pretrain: PretrainConfig,
    pub fdm: FdmConfig,
    pub depth: DepthConfig,
    pub joint: JointConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data: DatasetConfig::default(),
            arch: ArchConfig::default(),
            clean: CleanConfig::default(),
            pretrain: PretrainConfig::default(),
            fdm: FdmConfig::default(),
            depth: DepthConfig::default(),
            joint: JointConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small budgets for smoke runs: 64x64 scenes, tens of steps per phase.
    pub fn smoke() -> Self {
        let mut c = RunConfig::default();
        c.data.train = 16;
        c.data.val = 4;
        c.data.test = 8;
        c.data.real_fog = 8;
        c.data.real_fog_test = 8;
        c.clean.iterations = 20;
        c.pretrain.iterations = 10;
        c.fdm.iterations = 5;
        c.depth.iterations = 10;
        c.joint.iterations = 20;
        c.finetune.iterations = 20;
        for b in [
            &mut c.clean.batch_size,
            &mut c.pretrain.batch_size,
            &mut c.fdm.batch_size,
            &mut c.depth.batch_size,
            &mut c.joint.batch_size,
            &mut c.finetune.batch_size,
        ] {
            *b = 4;
        }
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies one `section.key=value` assignment. The value is parsed as a
    /// TOML literal when possible and as a bare string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let path = path.trim();
        let raw = raw.trim();
        let value = parse_literal(raw);
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Format(e.to_string()))?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown configuration key `{path}`")))?;
        }
        *slot = coerce(slot, value);
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{path}: {}", one_line(&e.to_string()))))?;
        *self = cfg;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            self.set(o.as_ref())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.arch.validate()?;
        if self.arch.num_classes != self.data.scene.num_classes {
            return Err(Error::Config(format!(
                "arch.num_classes ({}) differs from data.scene.num_classes ({})",
                self.arch.num_classes, self.data.scene.num_classes
            )));
        }
        if self.clean.batch_size == 0 || !(self.clean.lr > 0.0) {
            return Err(Error::Config("clean: batch_size and lr must be positive".into()));
        }
        self.pretrain.validate()?;
        self.fdm.validate()?;
        self.joint.sgd.validate()?;
        self.finetune.validate()?;
        if self.data.train == 0 || self.data.test == 0 || self.data.real_fog_test == 0 {
            return Err(Error::Config("data: train, test and real_fog_test must be non-empty".into()));
        }
        Ok(())
    }

    pub fn context(&self) -> RunContext {
        RunContext {
            seed: self.seed,
            config: self.to_json(),
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Lets integer literals fill float fields (`lr=1` means `1.0`).
fn coerce(old: &toml::Value, new: toml::Value) -> toml::Value {
    match (old, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
