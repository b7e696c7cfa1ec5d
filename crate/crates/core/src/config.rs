//! The single settings file: every section optional, dotted `key=value`
//! overrides on top, and a resolved snapshot written next to each run's
//! outputs.

use crate::augment::AugmentConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::landmark::LandmarkConfig;
use crate::pipeline::PipelineConfig;
use crate::pose::PoseConfig;
use crate::recipe::{DetectorRecipe, LandmarkRecipe, PoseRecipe};
use crate::synth::SceneConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const SNAPSHOT_FILE: &str = "resolved-config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipes {
    pub detector: DetectorRecipe,
    pub landmark: LandmarkRecipe,
    pub pose: PoseRecipe,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    pub landmark: LandmarkConfig,
    pub pose: PoseConfig,
    /// Photometric condition used for degraded-crop evaluation.
    pub degraded: Option<AugmentConfig>,
    pub train: Recipes,
    pub pipeline: PipelineConfig,
}

/// Parses an override value as a TOML literal, falling back to a bare
/// string (`name=run7` works without quotes).
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to `root`, creating tables on the way.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

impl Settings {
    /// Reads `path` (defaults when `None`), applies `overrides`, fills the
    /// bed from the scene when unset, resolves relative checkpoint and
    /// calibration paths against the file's directory, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut s: Settings = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if s.pipeline.bed.is_none() {
            s.pipeline.bed = Some(s.scene.bed);
        }
        if let Some(dir) = path.and_then(Path::parent) {
            s.pipeline.checkpoints = s.pipeline.checkpoints.rebased(dir);
            if let Some(c) = &s.pipeline.calibration {
                if c.is_relative() {
                    s.pipeline.calibration = Some(dir.join(c));
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.landmark.validate()?;
        self.pose.validate()?;
        if let Some(d) = &self.degraded {
            d.validate()?;
        }
        self.pipeline.validate()
    }

    pub fn degraded(&self) -> AugmentConfig {
        self.degraded.clone().unwrap_or_else(crate::recipe::degraded_condition)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved settings into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SNAPSHOT_FILE), self.to_toml_string()?)?;
        Ok(())
    }
}
