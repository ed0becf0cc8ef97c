//! The experiment configuration file: one TOML document covering mixture,
//! training, evaluation, and output settings, with dotted-key overrides so
//! any field can be set from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::experiment::{EvalSettings, DEFAULT_TRIALS};
use crate::mixture::{self, Component, MixtureError, MixtureSpec};
use crate::trainer::TrainConfig;

/// Environment variable consulted for the default output directory.
pub const OUTPUT_DIR_ENV: &str = "DISTFIT_OUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override '{entry}' must look like section.key=value")]
    BadOverride { entry: String },
    #[error("override '{key}': cannot parse value '{value}'")]
    BadOverrideValue { key: String, value: String },
    #[error("override '{key}' walks through a value that is not a table")]
    OverridePath { key: String },
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

/// How the target mixture is described in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum MixtureSection {
    /// Equally spaced Gaussians on a circle.
    Ring { k: usize, radius: f64, std: f64, weights: Option<Vec<f64>> },
    /// Components listed one by one.
    Explicit { components: Vec<Component> },
}

impl MixtureSection {
    pub fn to_spec(&self) -> Result<MixtureSpec, MixtureError> {
        match self {
            Self::Ring { k, radius, std, weights } => {
                mixture::ring_spec(*k, *radius, *std, weights.as_deref())
            }
            Self::Explicit { components } => MixtureSpec::new(components.clone()),
        }
    }
}

impl Default for MixtureSection {
    fn default() -> Self {
        Self::Ring { k: 8, radius: 2.0, std: 0.02, weights: None }
    }
}

/// Everything a full experiment needs, as written in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mixture: MixtureSection,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub experiment: ExperimentSection,
    /// Output directory; flag and environment variable can substitute.
    pub output_dir: Option<PathBuf>,
}

/// Trial fan-out settings. The base seed is `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub trials: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { trials: DEFAULT_TRIALS }
    }
}

/// Parse a config document and apply `key.path=value` overrides. Overrides
/// land on the fully materialized tree (file plus defaults), so a single
/// dotted key can adjust one field of an otherwise defaulted section.
pub fn parse_with_overrides(
    text: &str,
    overrides: &[String],
) -> Result<ExperimentConfig, ConfigError> {
    let doc: Table = toml::from_str(text)?;
    let parsed: ExperimentConfig = Value::Table(doc).try_into()?;
    if overrides.is_empty() {
        return Ok(parsed);
    }
    let full = toml::to_string(&parsed).expect("a parsed config serializes");
    let mut doc: Table = toml::from_str(&full).expect("round trip of a parsed config");
    for entry in overrides {
        apply_override(&mut doc, entry)?;
    }
    Ok(Value::Table(doc).try_into()?)
}

/// Read and parse a config file.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_with_overrides(&text, overrides)
}

fn apply_override(doc: &mut Table, entry: &str) -> Result<(), ConfigError> {
    let Some((key, raw)) = entry.split_once('=') else {
        return Err(ConfigError::BadOverride { entry: entry.to_string() });
    };
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::BadOverride { entry: entry.to_string() });
    }
    let value = parse_override_value(key, raw)?;
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("validated non-empty");
    let mut cursor = doc;
    for part in parts {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::OverridePath { key: key.to_string() })?;
    }
    // Switching a section's kind starts that section fresh: the old
    // variant's fields would otherwise linger and be rejected as unknown.
    if last == "kind" && cursor.get("kind") != Some(&value) {
        cursor.clear();
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// A value is parsed as TOML first (numbers, booleans, arrays, quoted
/// strings); anything that fails falls back to a bare string, so
/// `penalty=gdf` works without quoting.
fn parse_override_value(key: &str, raw: &str) -> Result<Value, ConfigError> {
    let as_toml = toml::from_str::<Table>(&format!("v = {raw}"));
    let mut table = match as_toml {
        Ok(t) => t,
        Err(_) => toml::from_str::<Table>(&format!("v = {raw:?}")).map_err(|_| {
            ConfigError::BadOverrideValue { key: key.to_string(), value: raw.to_string() }
        })?,
    };
    Ok(table.remove("v").expect("parsed exactly one key"))
}

/// Output directory precedence: explicit flag, then config file, then the
/// environment variable, then `runs`.
pub fn resolve_output_dir(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Some(dir) = &config.output_dir {
        return dir.clone();
    }
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        return PathBuf::from(dir);
    }
    PathBuf::from("runs")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::PenaltyKind;

    #[test]
    fn empty_document_yields_defaults() {
        let config = parse_with_overrides("", &[]).unwrap();
        assert_eq!(config, ExperimentConfig::default());
        assert_eq!(config.experiment.trials, DEFAULT_TRIALS);
        let spec = config.mixture.to_spec().unwrap();
        assert_eq!(spec.k(), 8);
    }

    #[test]
    fn roundtrip_is_lossless() {
        let config = parse_with_overrides(
            "[mixture]\nkind = \"ring\"\nk = 5\nradius = 1.5\nstd = 0.1\n",
            &[],
        )
        .unwrap();
        let text = toml::to_string(&config).unwrap();
        let again = parse_with_overrides(&text, &[]).unwrap();
        assert_eq!(config, again);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = parse_with_overrides("[train]\nlearning_rate = 0.1\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "unhelpful message: {msg}");
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let config = parse_with_overrides(
            "",
            &[
                "train.lambda=0.25".to_string(),
                "train.penalty=ldf".to_string(),
                "mixture.std=0.5".to_string(),
                "experiment.trials=3".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.train.lambda, 0.25);
        assert_eq!(config.train.penalty, PenaltyKind::Ldf);
        assert_eq!(config.experiment.trials, 3);
        match config.mixture {
            MixtureSection::Ring { std, .. } => assert_eq!(std, 0.5),
            _ => panic!("expected a ring"),
        }
    }

    #[test]
    fn override_arrays_and_strings_parse() {
        let config = parse_with_overrides(
            "",
            &[
                "mixture.weights=[0.86, 0.02, 0.02, 0.02, 0.02, 0.02, 0.02, 0.02]".to_string(),
                "train.gdf_source=dataset_pass".to_string(),
            ],
        )
        .unwrap();
        match &config.mixture {
            MixtureSection::Ring { weights: Some(w), .. } => assert_eq!(w[0], 0.86),
            other => panic!("unexpected mixture: {other:?}"),
        }
    }

    #[test]
    fn bad_overrides_name_the_problem() {
        assert!(matches!(
            parse_with_overrides("", &["no_equals".to_string()]),
            Err(ConfigError::BadOverride { .. })
        ));
        assert!(matches!(
            parse_with_overrides("", &["a..b=1".to_string()]),
            Err(ConfigError::BadOverride { .. })
        ));
        let err =
            parse_with_overrides("", &["train.lambda.x=1".to_string()]).unwrap_err();
        assert!(matches!(err, ConfigError::OverridePath { .. }));
    }

    #[test]
    fn unknown_override_key_is_caught_at_deserialization() {
        let err = parse_with_overrides("", &["train.warmup=5".to_string()]).unwrap_err();
        assert!(err.to_string().contains("warmup"));
    }

    #[test]
    fn output_dir_precedence_prefers_the_flag() {
        let mut config = ExperimentConfig::default();
        config.output_dir = Some(PathBuf::from("from-config"));
        let flagged = resolve_output_dir(Some(Path::new("from-flag")), &config);
        assert_eq!(flagged, PathBuf::from("from-flag"));
        assert_eq!(resolve_output_dir(None, &config), PathBuf::from("from-config"));
        config.output_dir = None;
        // Environment fallback is covered in the CLI integration tests where
        // the process environment is controlled.
    }

    #[test]
    fn explicit_components_parse() {
        let text = "[mixture]\nkind = \"explicit\"\n\n[[mixture.components]]\nweight = 0.5\ncenter = [0.0, 1.0]\nstd = 0.1\n\n[[mixture.components]]\nweight = 0.5\ncenter = [0.0, -1.0]\nstd = 0.1\n";
        let config = parse_with_overrides(text, &[]).unwrap();
        let spec = config.mixture.to_spec().unwrap();
        assert_eq!(spec.k(), 2);
        assert_eq!(spec.components()[1].center, [0.0, -1.0]);
    }
}
