//! Machine-readable run report. Each command updates its own section of
//! report.json in the output directory; wall-clock numbers live under the
//! separate "timing" key so determinism checks can exclude them.

use crate::CliError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForgeSection {
    pub config_digest: String,
    pub model_file: String,
    pub parameters: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSection {
    pub provenance: String,
    pub n_sequences: usize,
    pub sequence_len: usize,
    pub sigma: f64,
    pub mean_ppl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forward_passes_per_search: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptureSection {
    pub trace_slots: usize,
    pub total_rows: usize,
    pub trace_file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertLoss {
    pub layer: usize,
    pub expert: usize,
    /// Unweighted output loss of the quantized expert on its captured
    /// activations, summed over the three linears. Absent without traces.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_loss: Option<f64>,
    /// Affinity-weighted counterpart.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighted_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizeSection {
    pub method: String,
    pub agq: bool,
    pub ebss: bool,
    pub hadamard: bool,
    pub bits: u32,
    pub quantized_file: String,
    pub per_expert: Vec<ExpertLoss>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_output_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_weighted_loss: Option<f64>,
    /// Experts quantized by plain round-to-nearest because no calibration
    /// token ever reached them.
    pub uncalibrated_experts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    pub ppl_fp: f64,
    pub ppl_quantized: f64,
    pub logit_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_sigma: Option<f64>,
    pub eval_sequences: usize,
    pub forward_passes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Report {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forge: Option<ForgeSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capture: Option<CaptureSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantize: Option<QuantizeSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    /// Wall-clock milliseconds per command; excluded from determinism
    /// comparisons.
    #[serde(default)]
    pub timing: BTreeMap<String, f64>,
}

impl Report {
    pub fn load_or_default(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read report: {e}")))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("malformed report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Data(format!("cannot serialize report: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write report: {e}")))
    }
}
