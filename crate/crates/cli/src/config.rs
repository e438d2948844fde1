//! Experiment configuration: one TOML file per experiment, with flag and
//! `--set key=value` overrides applied before validation.

use std::path::{Path, PathBuf};

use reclaim::corpus::{Language, SplitRatios};
use reclaim::training::RunConfig;
use reclaim::weak_labeler::LlmSettings;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/llm_cache.jsonl`.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    /// Defaults to `<run_dir>/split.json`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Defaults to `<run_dir>/proxies.jsonl`.
    #[serde(default)]
    pub proxies: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSettings {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        let r = SplitRatios::default();
        Self {
            train: r.train,
            validation: r.validation,
            test: r.test,
            seed: 42,
        }
    }
}

impl SplitSettings {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            validation: self.validation,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub language: Language,
    pub paths: Paths,
    #[serde(default)]
    pub split: SplitSettings,
    #[serde(default)]
    pub training: RunConfig,
    #[serde(default)]
    pub llm: LlmSettings,
}

/// Parses `key.path=value`; the value is read as a TOML literal, falling back
/// to a bare string.
fn parse_override(entry: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {entry:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Config(format!(
            "override {entry:?} has an empty key segment"
        )));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(
    root: &mut toml::Table,
    path: &[String],
    value: toml::Value,
) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for segment in parents {
        let entry = table
            .entry(segment.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!(
                "override path {}: {segment} is not a table",
                path.join(".")
            ))
        })?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl PipelineConfig {
    /// Loads `path`, applies overrides, and resolves relative paths against
    /// the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut table: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for entry in overrides {
            let (key, value) = parse_override(entry)?;
            apply_override(&mut table, &key, value)?;
        }
        let mut config: PipelineConfig =
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| {
                    CliError::Config(format!("{}: {}", path.display(), e.message()))
                })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.paths.resolve_against(base);
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.split.ratios().validate()?;
        self.training
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.llm.fan_out == 0 {
            return Err(CliError::Config("llm.fan_out must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.run_dir);
        for p in [&mut self.cache, &mut self.manifest, &mut self.proxies]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn cache(&self) -> PathBuf {
        self.cache
            .clone()
            .unwrap_or_else(|| self.run_dir.join("llm_cache.jsonl"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.run_dir.join("split.json"))
    }

    pub fn proxies(&self) -> PathBuf {
        self.proxies
            .clone()
            .unwrap_or_else(|| self.run_dir.join("proxies.jsonl"))
    }
}
