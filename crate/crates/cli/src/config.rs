//! Pipeline configuration: a JSON file plus command-line overrides.
//! Unknown keys are rejected so ablation grids stay machine-diffable.

use crate::CliError;
use moeptq::ebss::EbssConfig;
use moeptq::model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rtn,
    Gptq,
    Awq,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::Gptq => "gptq",
            Method::Awq => "awq",
        }
    }

    pub fn needs_calibration(&self) -> bool {
        !matches!(self, Method::Rtn)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeParams {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_shared: usize,
    pub n_routed: usize,
    pub top_k: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub router_skew: f64,
}

impl ForgeParams {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            n_shared: self.n_shared,
            n_routed: self.n_routed,
            top_k: self.top_k,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forge: Option<ForgeParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSettings {
    #[serde(default = "default_bits")]
    pub bits: u32,
    #[serde(default = "default_damping")]
    pub gptq_damping: f64,
    #[serde(default = "default_grid")]
    pub awq_grid: usize,
}

fn default_bits() -> u32 {
    4
}
fn default_damping() -> f64 {
    0.01
}
fn default_grid() -> usize {
    20
}

impl Default for QuantSettings {
    fn default() -> Self {
        Self { bits: default_bits(), gptq_damping: default_damping(), awq_grid: default_grid() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EbssSettings {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_target_len")]
    pub target_len: usize,
    #[serde(default = "default_n_sequences")]
    pub n_sequences: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_width() -> usize {
    4
}
fn default_target_len() -> usize {
    32
}
fn default_n_sequences() -> usize {
    16
}
fn default_tau() -> f64 {
    1.2
}

impl Default for EbssSettings {
    fn default() -> Self {
        Self {
            width: default_width(),
            target_len: default_target_len(),
            n_sequences: default_n_sequences(),
            tau: default_tau(),
        }
    }
}

impl EbssSettings {
    pub fn to_config(&self, seed: u64) -> EbssConfig {
        EbssConfig {
            width: self.width,
            target_len: self.target_len,
            n_sequences: self.n_sequences,
            tau: self.tau,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub model: ModelSource,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub agq: bool,
    #[serde(default)]
    pub ebss: bool,
    #[serde(default)]
    pub hadamard: bool,
    #[serde(default)]
    pub quant: QuantSettings,
    #[serde(default)]
    pub ebss_config: EbssSettings,
    /// External calibration file (token-id text format).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_corpus: Option<PathBuf>,
    /// Evaluate the full-precision model against itself (diagnostic).
    #[serde(default)]
    pub eval_self: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_method() -> Method {
    Method::Rtn
}

impl PipelineConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory (set \"out\" or --out)".into()))
    }

    /// Basic cross-field invariants shared by every command.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.agq && !self.ebss && self.calibration.is_none() {
            return Err(CliError::Config(
                "agq=true requires a calibration source (ebss=true or a calibration file)".into(),
            ));
        }
        Ok(())
    }
}

/// Applies a `--set key=value` override onto the raw JSON document. Dotted
/// keys address nested objects; values parse as JSON when possible and fall
/// back to strings.
pub fn apply_override(doc: &mut serde_json::Value, setting: &str) -> Result<(), CliError> {
    let (key, raw_value) = setting
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set needs key=value, got {setting:?}")))?;
    let value = serde_json::from_str::<serde_json::Value>(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));

    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Config(format!("empty path segment in {key:?}")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{key:?} does not address an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Loads the config file, applies overrides, and deserializes strictly.
pub fn load_config(
    path: &Path,
    sets: &[String],
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
    for setting in sets {
        apply_override(&mut doc, setting)?;
    }
    let mut config: PipelineConfig = serde_json::from_value(doc)
        .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    if let Some(seed) = seed {
        config.seed = Some(seed);
    }
    if let Some(out) = out {
        config.out = Some(out);
    }
    config.validate()?;
    Ok(config)
}
