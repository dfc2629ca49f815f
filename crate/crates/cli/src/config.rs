//! Run configuration: one TOML file plus dotted-path overrides.

use std::path::{Path, PathBuf};

use adaptive2::admm::ModelConfig;
use adaptive2::data::{generate_synthetic, load_csv, split, Dataset, SplitSpec, SyntheticConfig};
use adaptive2::features::FeatureSchema;
use adaptive2::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration problem; commands exit with status 2 on these.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default)]
    pub max_rows: Option<usize>,
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
    #[serde(default)]
    pub split: SplitSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required for CSV data; synthetic data carries its own schema.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<FeatureSchema>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    pub output_dir: PathBuf,
}

/// The three splits of a run's data.
pub struct Splits {
    pub schema: FeatureSchema,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<Dataset, ConfigError> {
        match name {
            "train" => Ok(self.train.clone()),
            "val" => Ok(self.val.clone()),
            "test" => Ok(self.test.clone()),
            "all" => {
                let mut all = self.train.clone();
                all.records.extend(self.val.records.iter().cloned());
                all.records.extend(self.test.records.iter().cloned());
                all.records.sort_by_key(|r| r.id);
                all.raw_values = None;
                Ok(all)
            }
            other => Err(ConfigError::new(format!("unknown split {other:?}; expected train, val, test or all"))),
        }
    }
}

impl RunConfig {
    /// Reads `path`, applies `key.path=value` overrides, resolves relative
    /// paths against the config file's directory and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        let mut table: toml::Table = text.parse().map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::new(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(csv) = &mut cfg.data.csv {
            if csv.path.is_relative() {
                csv.path = base.join(&csv.path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schema(&self) -> Result<FeatureSchema, ConfigError> {
        match (&self.data.synthetic, &self.schema) {
            (Some(s), _) => s.schema().map_err(|e| ConfigError::new(format!("data.synthetic: {e}"))),
            (None, Some(schema)) => Ok(schema.clone()),
            (None, None) => Err(ConfigError::new("schema: required with data.csv")),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.data.synthetic, &self.data.csv) {
            (Some(_), Some(_)) => return Err(ConfigError::new("data: set exactly one of data.synthetic and data.csv, not both")),
            (None, None) => return Err(ConfigError::new("data: missing data source; set data.synthetic or data.csv")),
            _ => {}
        }
        if self.data.synthetic.is_some() && self.schema.is_some() {
            return Err(ConfigError::new("schema: synthetic data defines its own schema; remove the schema section"));
        }
        if let Some(csv) = &self.data.csv {
            if !csv.path.is_file() {
                return Err(ConfigError::new(format!("data.csv.path: {} does not exist", csv.path.display())));
            }
        }
        if let Some(s) = &self.data.synthetic {
            s.validate().map_err(|e| ConfigError::new(format!("data.synthetic: {e}")))?;
        }
        let schema = self.schema()?;
        schema.validate().map_err(|e| ConfigError::new(format!("schema: {e}")))?;
        self.data.split.validate().map_err(|e| ConfigError::new(format!("data.split: {e}")))?;
        self.model.validate(&schema).map_err(|e| ConfigError::new(format!("model: {e}")))?;
        self.training.validate().map_err(|e| ConfigError::new(format!("training: {e}")))?;
        Ok(())
    }

    /// Loads or generates the data and splits it.
    pub fn splits(&self) -> anyhow::Result<Splits> {
        let schema = self.schema()?;
        let ds = match (&self.data.synthetic, &self.data.csv) {
            (Some(s), _) => generate_synthetic(s)?,
            (None, Some(c)) => load_csv(&c.path, &schema, &c.label_column, c.max_rows).map_err(|e| ConfigError::new(format!("data.csv: {e}")))?,
            (None, None) => unreachable!("validated"),
        };
        let (train, val, test) = split(&ds, &self.data.split)?;
        Ok(Splits { schema, train, val, test })
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sets `a.b.c` in `table` from `a.b.c=value`. The value is read as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::new(format!("override {spec:?}: expected key.path=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::new(format!("override {spec:?}: empty path segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("non-empty path");
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::new(format!("override {spec:?}: {p} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_parses_literals_and_strings() {
        let mut t: toml::Table = "[training]\nseed = 1\n".parse().unwrap();
        apply_override(&mut t, "training.seed=7").unwrap();
        apply_override(&mut t, "model.routing.mode=soft").unwrap();
        apply_override(&mut t, "data.synthetic.conflict_fields=[1, 2]").unwrap();
        assert_eq!(t["training"]["seed"].as_integer(), Some(7));
        assert_eq!(t["model"]["routing"]["mode"].as_str(), Some("soft"));
        assert_eq!(t["data"]["synthetic"]["conflict_fields"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn override_rejects_malformed_specs() {
        let mut t = toml::Table::new();
        assert!(apply_override(&mut t, "no_equals").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
        apply_override(&mut t, "a=1").unwrap();
        assert!(apply_override(&mut t, "a.b=1").is_err());
    }
}
