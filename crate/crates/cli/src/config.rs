use std::path::{Path, PathBuf};

use mcnn_core::corpus::Split;
use mcnn_core::model::McnnConfig;
use mcnn_core::pipeline::ParseOptions;
use mcnn_core::synth::SynthSpec;
use mcnn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Corpus directory; `--corpus` wins when both are given.
    pub path: Option<PathBuf>,
    /// Split parsed, evaluated and ablated on.
    pub split: Split,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { path: None, split: Split::Test }
    }
}

/// Everything a run needs. Retrieval settings live with their consumers:
/// `train.extractor` / `train.k_train` for training and indexing,
/// `parse.k` for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub synth: SynthSpec,
    pub model: McnnConfig,
    pub train: TrainConfig,
    pub parse: ParseOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSection::default(),
            synth: SynthSpec::default(),
            model: McnnConfig::desk(),
            train: TrainConfig::desk(),
            parse: ParseOptions::desk(),
        }
    }
}

/// Recursively overlays `patch` onto `base`; tables merge, anything else
/// replaces.
fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal and falls back to a
/// bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Usage(format!("override {spec:?} has an empty key segment")));
    }
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just written"),
        Err(_) => toml::Value::String(raw.trim().to_owned()),
    };
    Ok((path, value))
}

fn to_table<T: Serialize>(value: &T) -> toml::Table {
    toml::Table::try_from(value).expect("config types serialize to TOML tables")
}

impl RunConfig {
    /// Defaults, then the optional file, then `--set` overrides. Unknown keys
    /// anywhere are rejected by name.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = to_table(&Self::default());
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let user: toml::Table =
                text.parse().map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            merge(&mut table, user);
        }
        for spec in overrides {
            let (path, value) = parse_override(spec)?;
            let mut patch = toml::Table::new();
            let mut cursor = &mut patch;
            for seg in &path[..path.len() - 1] {
                cursor = cursor
                    .entry(seg.clone())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .expect("fresh entries are tables");
            }
            cursor.insert(path[path.len() - 1].clone(), value);
            merge(&mut table, patch);
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid config: {}", e.message())))?;
        config.model.validate()?;
        config.train.validate()?;
        config.parse.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config types serialize to TOML")
    }
}

/// A stand-alone synthetic spec file: either a bare spec or one wrapped in a
/// `[synth]` table. Missing keys take the default spec's values.
pub fn load_synth_spec(path: &Path) -> Result<SynthSpec, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read spec {}: {e}", path.display())))?;
    let mut user: toml::Table = text.parse().map_err(|e| CliError::Usage(format!("spec {}: {e}", path.display())))?;
    if let Some(toml::Value::Table(inner)) = user.remove("synth") {
        if !user.is_empty() {
            return Err(CliError::Usage(format!("spec {}: keys outside [synth]", path.display())));
        }
        user = inner;
    }
    let mut table = to_table(&SynthSpec::default());
    merge(&mut table, user);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid spec {}: {}", path.display(), e.message())))
}
