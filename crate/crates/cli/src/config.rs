//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use versionguard::distributions::TaskSource;
use versionguard::experiment::BreachScenario;
use versionguard::seed;
use versionguard::theory::GridSpec;
use versionguard::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// A problem with the configuration or the flags. Exits with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub seeds: Seeds,
    pub task: TaskSource,
    pub train: TrainConfig,
    /// Breach game settings, including the attack and its budget.
    pub scenario: BreachScenario,
    pub paths: Paths,
    pub serve: ServeConfig,
    /// Grid for theory-check; the worked example when absent.
    pub theory: Option<GridSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            master_seed: 0,
            seeds: Seeds::default(),
            task: TaskSource::default(),
            train: TrainConfig::default(),
            scenario: BreachScenario::default(),
            paths: Paths::default(),
            serve: ServeConfig::default(),
            theory: None,
        }
    }
}

/// Per-purpose seeds. Unset entries are derived from the master seed, and
/// the resolved values overwrite the seed fields nested in `train` and
/// `scenario`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub task: Option<u64>,
    pub train: Option<u64>,
    pub scenario: Option<u64>,
    pub attack: Option<u64>,
    pub rotation: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub store: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7878".into(),
        }
    }
}

const TAG_TASK: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_SCENARIO: u64 = 3;
const TAG_ATTACK: u64 = 4;
const TAG_ROTATION: u64 = 5;

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| config_error(format!("bad config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(config_error(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Fills in every seed and pushes them into the nested configs.
    pub fn resolve(mut self) -> Self {
        let m = self.master_seed;
        let s = &mut self.seeds;
        s.task.get_or_insert(seed::derive(m, TAG_TASK));
        s.train.get_or_insert(seed::derive(m, TAG_TRAIN));
        s.scenario.get_or_insert(seed::derive(m, TAG_SCENARIO));
        s.attack.get_or_insert(seed::derive(m, TAG_ATTACK));
        s.rotation.get_or_insert(seed::derive(m, TAG_ROTATION));
        self.train.seed = self.seeds.train.expect("resolved");
        self.scenario.seed = self.seeds.scenario.expect("resolved");
        self.scenario.budget.seed = self.seeds.attack.expect("resolved");
        self
    }

    pub fn task_seed(&self) -> u64 {
        self.seeds
            .task
            .unwrap_or_else(|| seed::derive(self.master_seed, TAG_TASK))
    }

    pub fn rotation_seed(&self) -> u64 {
        self.seeds
            .rotation
            .unwrap_or_else(|| seed::derive(self.master_seed, TAG_ROTATION))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let check = |r: versionguard::Result<()>| r.map_err(|e| config_error(e.to_string()));
        check(self.train.validate())?;
        check(self.scenario.validate())?;
        if let TaskSource::SyntheticGlyphs(p) = &self.task {
            check(p.validate())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse(r#"{"schema_version": 1, "bogus": 3}"#).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(RunConfig::parse(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn schema_version_checked() {
        assert!(RunConfig::parse(r#"{"schema_version": 2}"#).is_err());
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn seeds_resolve_from_master() {
        let a = RunConfig::default().resolve();
        let b = RunConfig {
            master_seed: 1,
            ..RunConfig::default()
        }
        .resolve();
        assert_ne!(a.train.seed, b.train.seed);
        assert_eq!(a, RunConfig::default().resolve());
        let pinned = RunConfig {
            seeds: Seeds {
                train: Some(9),
                ..Seeds::default()
            },
            ..RunConfig::default()
        }
        .resolve();
        assert_eq!(pinned.train.seed, 9);
        // Resolving twice changes nothing.
        assert_eq!(pinned.clone().resolve(), pinned);
    }
}
