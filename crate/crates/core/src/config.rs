//! Run configuration: one TOML file with a section per concern.
//!
//! Precedence, lowest first: built-in defaults, the config file, then
//! `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::model::ModelSpec;
use crate::pretrain::TrainConfig;
use crate::probe::ProbeConfig;
use crate::synth::{FutureOptions, QAOptions, SynthConfig};
use crate::tune::TuneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub addr: String,
    /// Maximum cached prefixes before LRU eviction.
    pub capacity: usize,
    /// When false every query runs a full uncached pass.
    pub cache: bool,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            capacity: 10_000,
            cache: true,
        }
    }
}

/// External answer generator used in place of the rule-based surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub url: String,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            timeout_ms: 10_000,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Seeds every stochastic component unless `keep_seeds` is set.
    pub seed: u64,
    pub keep_seeds: bool,
    pub run_dir: PathBuf,
    pub scenario: String,
    pub synth: SynthConfig,
    pub future: FutureOptions,
    pub qa: QAOptions,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub tune: TuneConfig,
    pub probe: ProbeConfig,
    pub serve: ServeConfig,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: 0,
            keep_seeds: false,
            run_dir: PathBuf::from("runs"),
            scenario: e.scenario,
            synth: e.synth,
            future: FutureOptions::default(),
            qa: QAOptions::default(),
            model: e.model,
            train: e.train,
            tune: e.tune,
            probe: e.probe,
            serve: ServeConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// File (if any) plus overrides, then seed propagation.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        base.with_overrides(overrides).map(|c| c.seeded())
    }

    /// Applies `a.b.c=value` overrides. Values parse as TOML literals and
    /// fall back to bare strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let unknown = toml::Value::Table(table.clone());
        let out: Self = unknown.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        // serde(default) silently drops unknown keys; catch typos here.
        let back = toml::Table::try_from(&out).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let k = o.split_once('=').map_or(o.as_str(), |(k, _)| k.trim());
            if lookup(&back, k).is_none() {
                return Err(Error::Config(format!("unknown config key {k}")));
            }
        }
        Ok(out)
    }

    /// Copies the top-level seed into every component.
    pub fn seeded(mut self) -> Self {
        if self.keep_seeds {
            return self;
        }
        let s = self.seed;
        self.synth.seed = s;
        self.qa.seed = s;
        self.model.model.seed = s;
        self.model.hier.encoder_seed = s;
        self.train.seed = s;
        self.tune.seed = s;
        self.probe.seed = s;
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved config as `config.toml` under `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            synth: self.synth.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            tune: self.tune.clone(),
            probe: self.probe.clone(),
            scenario: self.scenario.clone(),
            ..ExperimentConfig::default()
        }
    }
}

fn lookup<'a>(t: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut cur = t.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml_str("seed = 4\n[train]\nsteps = 12\n").unwrap();
        assert_eq!(c.train.steps, 12);
        assert_eq!(c.train.batch_size, RunConfig::default().train.batch_size);
    }

    #[test]
    fn overrides_beat_file_values() {
        let c = RunConfig::from_toml_str("[train]\nsteps = 12\n").unwrap();
        let o = c
            .with_overrides(&["train.steps=40".into(), "train.tau=0.1".into(), "scenario=credit_risk".into()])
            .unwrap();
        assert_eq!(o.train.steps, 40);
        assert_eq!(o.train.tau, 0.1);
        assert_eq!(o.scenario, "credit_risk");
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let c = RunConfig::default();
        assert!(c.with_overrides(&["train.stepz=3".into()]).is_err());
        assert!(c.with_overrides(&["train.steps".into()]).is_err());
        assert!(c.with_overrides(&["train.steps=abc".into()]).is_err());
    }

    #[test]
    fn seed_reaches_every_component() {
        let c = RunConfig {
            seed: 9,
            ..RunConfig::default()
        }
        .seeded();
        assert_eq!(
            [c.synth.seed, c.qa.seed, c.model.model.seed, c.train.seed, c.tune.seed, c.probe.seed],
            [9; 6]
        );
    }
}
