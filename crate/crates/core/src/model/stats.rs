//! Routing traces, expert-usage statistics and perplexity.

use super::forward::{model_forward, MoeTraceEntry};
use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};

/// Per-token per-layer routing records of one forward pass.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    /// entries[token][layer]
    entries: Vec<Vec<MoeTraceEntry>>,
    n_layers: usize,
    n_routed: usize,
    top_k: usize,
}

impl RoutingTrace {
    pub(crate) fn new(config: &ModelConfig) -> Self {
        Self {
            entries: Vec::new(),
            n_layers: config.n_layers,
            n_routed: config.n_routed,
            top_k: config.top_k,
        }
    }

    pub(crate) fn push_entry(&mut self, token: usize, layer: usize, entry: MoeTraceEntry) {
        if self.entries.len() <= token {
            self.entries.resize_with(token + 1, Vec::new);
        }
        debug_assert_eq!(self.entries[token].len(), layer);
        self.entries[token].push(entry);
    }

    pub fn n_tokens(&self) -> usize {
        self.entries.len()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_routed(&self) -> usize {
        self.n_routed
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn entry(&self, token: usize, layer: usize) -> &MoeTraceEntry {
        &self.entries[token][layer]
    }

    /// Adds this trace's routed assignments into per-layer per-expert counts.
    pub fn accumulate_counts(&self, counts: &mut [Vec<u64>]) {
        for per_layer in &self.entries {
            for (layer, entry) in per_layer.iter().enumerate() {
                for &j in &entry.selected {
                    counts[layer][j] += 1;
                }
            }
        }
    }
}

/// Usage frequencies and balance statistics over a batch of traces.
#[derive(Debug, Clone)]
pub struct ExpertUsageStats {
    /// per_layer_freq[layer][routed_expert], each layer summing to 1.
    pub per_layer_freq: Vec<Vec<f64>>,
    pub per_layer_sigma: Vec<f64>,
    /// Mean of the per-layer sigmas.
    pub sigma: f64,
}

/// Sample standard deviation (divisor E-1) of routed usage frequencies for
/// one layer's counts. Zero when fewer than two experts exist.
fn layer_sigma(freq: &[f64]) -> f64 {
    let e = freq.len();
    if e < 2 {
        return 0.0;
    }
    let mean = freq.iter().sum::<f64>() / e as f64;
    let ss: f64 = freq.iter().map(|u| (u - mean) * (u - mean)).sum();
    (ss / (e - 1) as f64).sqrt()
}

/// Balance sigma straight from per-layer per-expert assignment counts:
/// frequencies normalized per layer, sample std per layer, mean over layers.
/// Layers with zero assignments contribute sigma 0.
pub fn sigma_from_counts(counts: &[Vec<u64>]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for layer in counts {
        let sum: u64 = layer.iter().sum();
        if sum == 0 {
            continue;
        }
        let freq: Vec<f64> = layer.iter().map(|&c| c as f64 / sum as f64).collect();
        total += layer_sigma(&freq);
    }
    total / counts.len() as f64
}

/// Aggregated usage frequencies and sigma over a batch of routing traces.
pub fn expert_usage(traces: &[RoutingTrace]) -> Result<ExpertUsageStats> {
    let first = traces
        .iter()
        .find(|t| t.n_tokens() > 0)
        .ok_or_else(|| Error::InvalidInput("empty routing trace batch".into()))?;
    let n_layers = first.n_layers();
    let n_routed = first.n_routed();

    let mut counts = vec![vec![0u64; n_routed]; n_layers];
    for trace in traces {
        if trace.n_layers() != n_layers || trace.n_routed() != n_routed {
            return Err(Error::DimensionMismatch("mixed trace shapes".into()));
        }
        trace.accumulate_counts(&mut counts);
    }

    let mut per_layer_freq = Vec::with_capacity(n_layers);
    let mut per_layer_sigma = Vec::with_capacity(n_layers);
    for layer in &counts {
        let sum: u64 = layer.iter().sum();
        if sum == 0 {
            return Err(Error::InvalidInput(
                "a layer received no routed assignments".into(),
            ));
        }
        let freq: Vec<f64> = layer.iter().map(|&c| c as f64 / sum as f64).collect();
        per_layer_sigma.push(layer_sigma(&freq));
        per_layer_freq.push(freq);
    }
    let sigma = per_layer_sigma.iter().sum::<f64>() / n_layers as f64;
    Ok(ExpertUsageStats { per_layer_freq, per_layer_sigma, sigma })
}

/// exp(mean negative log-likelihood) over scored positions. Conditioning
/// starts at the first token; the first token itself is not scored.
pub fn ppl_from_logprobs(logprobs: &[Vec<f64>], tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InvalidInput(
            "perplexity needs at least two tokens".into(),
        ));
    }
    let n = tokens.len() - 1;
    let mut nll = 0.0f64;
    for i in 1..tokens.len() {
        nll -= logprobs[i - 1][tokens[i]];
    }
    Ok((nll / n as f64).exp())
}

/// Perplexity of a token sequence under the model.
pub fn perplexity(weights: &ModelWeights, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InvalidInput(
            "perplexity needs at least two tokens".into(),
        ));
    }
    let (logprobs, _) = model_forward(weights, tokens)?;
    ppl_from_logprobs(&logprobs, tokens)
}
