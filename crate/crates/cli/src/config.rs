use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use rigsfm::ba::BaOptions;
use rigsfm::rotation::RotationOptions;
use rigsfm::solver::{AdmmOptions, LmOptions};
use rigsfm::translation::TranslationOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("malformed override `{0}`, expected --key=value")]
    Malformed(String),
}

/// Stages that `stages.skip` may leave out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skippable {
    /// Angle refinement of unit positions and rig translations.
    RefineAngle,
    /// Joint refinement of positions and points.
    JointAngle,
    /// Both bundle adjustment rounds and the filter between them.
    Ba,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stages {
    pub skip: Vec<Skippable>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslationSection {
    pub cauchy_scale: f64,
    pub track_cauchy_scale: f64,
    pub max_track_length: usize,
    pub min_triangulation_angle_deg: f64,
}

impl Default for TranslationSection {
    fn default() -> Self {
        let d = TranslationOptions::default();
        Self {
            cauchy_scale: d.cauchy_scale,
            track_cauchy_scale: d.track_cauchy_scale,
            max_track_length: d.max_track_length,
            min_triangulation_angle_deg: d.min_triangulation_angle_deg,
        }
    }
}

/// Every tunable of the pipeline, one namespace per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub rotation: RotationOptions,
    pub translation: TranslationSection,
    pub admm: AdmmOptions,
    pub lm: LmOptions,
    pub ba: BaOptions,
    pub stages: Stages,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rotation: RotationOptions::default(),
            translation: TranslationSection::default(),
            admm: AdmmOptions::default(),
            lm: LmOptions::default(),
            ba: BaOptions::default(),
            stages: Stages::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn translation_options(&self) -> TranslationOptions {
        TranslationOptions {
            cauchy_scale: self.translation.cauchy_scale,
            track_cauchy_scale: self.translation.track_cauchy_scale,
            max_track_length: self.translation.max_track_length,
            min_triangulation_angle_deg: self.translation.min_triangulation_angle_deg,
            seed: self.seed,
            admm: self.admm,
            lm: self.lm,
        }
    }

    pub fn skips(&self, stage: Skippable) -> bool {
        self.stages.skip.contains(&stage)
    }
}

pub fn read_json_file(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Sets `key` (dotted path) in `doc`. The key must already exist in the
/// defaults; the value is read as JSON when possible and as a string
/// otherwise, and comma lists fill array-valued keys.
fn set_key(doc: &mut Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    }
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    *slot = match (&*slot, parsed) {
        (Value::Array(_), Value::String(s)) => Value::Array(
            s.split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| Value::String(t.to_string()))
                .collect(),
        ),
        (_, v) => v,
    };
    Ok(())
}

/// Builds a configuration of type `T` from its defaults, an optional JSON
/// document and `key=value` overrides, in that order of precedence.
pub fn resolve<T>(file: Option<Value>, overrides: &[String]) -> Result<T, ConfigError>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    // unknown keys in the file fail here, before overrides are applied
    let base: T = match file {
        Some(v) => serde_json::from_value(v)?,
        None => T::default(),
    };
    let mut doc = serde_json::to_value(&base)?;
    for o in overrides {
        let o = o.trim_start_matches("--");
        let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Malformed(o.to_string()))?;
        set_key(&mut doc, k, v)?;
    }
    Ok(serde_json::from_value(doc)?)
}
