//! Run configuration: TOML file plus `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::model::ArchitectureConfig;
use crate::synth::SynthConfig;
use crate::training::{LossConfig, TrainConfig};
use crate::wsss::PipelineConfig;

/// Named starting points for `[arch]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchPreset {
    #[default]
    Full,
    Compact,
    Tiny,
}

impl ArchPreset {
    pub fn build(self) -> ArchitectureConfig {
        match self {
            ArchPreset::Full => ArchitectureConfig::default(),
            ArchPreset::Compact => ArchitectureConfig::compact(),
            ArchPreset::Tiny => ArchitectureConfig::tiny(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: ArchPreset,
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it does not parse.
pub fn parse_override(spec: &str) -> Result<Table> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", spec)))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {:?} has an empty key", spec)));
    }
    let raw = raw.trim();
    let value = format!("v = {}", raw)
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut out = Table::new();
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = &mut out;
    for p in &parts[..parts.len() - 1] {
        cur = match cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => unreachable!("fresh table"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(out)
}

impl RunConfig {
    /// Defaults, then `file` (TOML text), then `overrides`.
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut layer = match file {
            Some(text) => text
                .parse::<Table>()
                .map_err(|e| Error::Config(format!("config file: {}", e)))?,
            None => Table::new(),
        };
        for o in overrides {
            merge(&mut layer, parse_override(o)?);
        }
        let preset: ArchPreset = match layer.get("preset") {
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("preset: {}", e)))?,
            None => ArchPreset::default(),
        };
        let base = RunConfig {
            preset,
            arch: preset.build(),
            ..RunConfig::default()
        };
        let mut table = Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, layer);
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.geometry().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        self.loss.validate()?;
        self.pipeline.smoothgrad.validate()?;
        if !(0.0..=1.0).contains(&self.pipeline.threshold) || !(self.pipeline.blur_sigma >= 0.0) {
            return Err(Error::Config(
                "pipeline threshold must be in [0, 1] and blur_sigma ≥ 0".into(),
            ));
        }
        self.synth.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_file_then_overrides() {
        let file = "preset = \"compact\"\n[train]\nepochs = 3\nlearning_rate = 0.01\n";
        let cfg = RunConfig::resolve(Some(file), &["train.epochs=5".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.arch, ArchitectureConfig::compact());
        assert_eq!(cfg.loss, LossConfig::default());
    }

    #[test]
    fn nested_and_string_overrides() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "pipeline.smoothgrad.samples=3".into(),
                "train.optimizer=sgd".into(),
                "arch.routing_iterations = 2".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pipeline.smoothgrad.samples, 3);
        assert_eq!(cfg.train.optimizer, crate::training::OptimizerKind::Sgd);
        assert_eq!(cfg.arch.routing_iterations, 2);
    }

    #[test]
    fn rejects_typos_and_bad_values() {
        assert!(RunConfig::resolve(None, &["train.epoch=3".into()]).is_err());
        assert!(RunConfig::resolve(None, &["loss.m_minus=0.95".into()]).is_err());
        assert!(RunConfig::resolve(Some("[train\n"), &[]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn serialized_config_reloads() {
        let cfg = RunConfig::resolve(None, &["preset=tiny".into(), "synth.size=34".into()]).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::resolve(Some(&text), &[]).unwrap(), cfg);
    }
}
