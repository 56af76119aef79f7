//! Run configuration: a TOML file, then `--set key=value` overrides, then
//! dedicated flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use patchocr::decoder::ModelConfig;
use patchocr::embedding::PatchConfig;
use patchocr::generate::GenerateConfig;
use patchocr::gradcheck::GradcheckConfig;
use patchocr::metrics::Protocol;
use patchocr::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { vocab_size: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Str36,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Numeric precision for training and inference.
    pub precision: Precision,
    pub model: ModelConfig,
    pub patch: PatchConfig,
    pub tokenizer: TokenizerConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            model: ModelConfig::default(),
            patch: PatchConfig::default(),
            tokenizer: TokenizerConfig::default(),
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override key `{key}`: `{part}` is not a section"))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut root = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: RunConfig = Value::Table(root).try_into().context("invalid configuration")?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.gradcheck_ok()?;
    Ok(cfg)
}

impl RunConfig {
    fn gradcheck_ok(&self) -> Result<()> {
        if self.gradcheck.step.is_nan() || self.gradcheck.step <= 0.0 {
            bail!("gradcheck.step must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
