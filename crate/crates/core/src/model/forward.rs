//! Forward passes: gating softmax, MoE layer with top-k routing, causal
//! single-head attention with rotary phases, and the full per-position
//! next-token log-probability computation with routing traces.

use super::stats::RoutingTrace;
use super::{LayerWeights, ModelWeights};
use crate::error::{Error, Result};
use crate::linalg::dot;

const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

/// One token's MoE routing record for one layer.
#[derive(Debug, Clone)]
pub struct MoeTraceEntry {
    /// Pre-norm MoE layer input, the activation every expert sees.
    pub expert_input: Vec<f64>,
    /// Gate probabilities of the shared experts (length m).
    pub shared_gates: Vec<f64>,
    /// Selected routed-expert indices, ascending (length k, values in 0..n).
    pub selected: Vec<usize>,
    /// Gate probabilities of the selected routed experts, aligned with
    /// `selected`.
    pub selected_gates: Vec<f64>,
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|v| v / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// x * W for a row vector x, with W stored input-major (rows = inputs).
fn vec_mat(x: &[f64], w: &crate::linalg::Matrix) -> Vec<f64> {
    debug_assert_eq!(x.len(), w.rows());
    let mut out = vec![0.0f64; w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = w.row(i);
        for j in 0..row.len() {
            out[j] += xi * row[j];
        }
    }
    out
}

/// Gate probabilities over all m+n experts: softmax(x * W_g).
/// Shared experts occupy the first m entries.
pub fn gate(weights: &ModelWeights, layer: usize, x: &[f64]) -> Vec<f64> {
    softmax(&vec_mat(x, &weights.layers[layer].gating))
}

/// Top-k routed indices by gate probability, ties broken by lowest index.
fn top_k_routed(routed_probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..routed_probs.len()).collect();
    order.sort_by(|&a, &b| {
        routed_probs[b]
            .partial_cmp(&routed_probs[a])
            .expect("gate probabilities are finite")
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(k).collect();
    selected.sort_unstable();
    selected
}

/// MoE layer output: sum of gate-weighted shared experts plus the top-k
/// gate-weighted routed experts. Gate probabilities are used as-is, with
/// no renormalization after selection.
pub fn moe_forward(
    weights: &ModelWeights,
    layer: usize,
    x: &[f64],
) -> (Vec<f64>, MoeTraceEntry) {
    let config = &weights.config;
    let lw: &LayerWeights = &weights.layers[layer];
    let probs = gate(weights, layer, x);
    let shared_gates = probs[..config.n_shared].to_vec();
    let routed_probs = &probs[config.n_shared..];
    let selected = top_k_routed(routed_probs, config.top_k);
    let selected_gates: Vec<f64> = selected.iter().map(|&j| routed_probs[j]).collect();

    let mut y = vec![0.0f64; config.d_model];
    for (i, &g) in shared_gates.iter().enumerate() {
        let out = lw.shared[i].forward(x);
        for (acc, v) in y.iter_mut().zip(&out) {
            *acc += g * v;
        }
    }
    for (&j, &g) in selected.iter().zip(&selected_gates) {
        let out = lw.routed[j].forward(x);
        for (acc, v) in y.iter_mut().zip(&out) {
            *acc += g * v;
        }
    }

    let entry = MoeTraceEntry {
        expert_input: x.to_vec(),
        shared_gates,
        selected,
        selected_gates,
    };
    (y, entry)
}

fn apply_rope(v: &mut [f64], position: usize) {
    let d = v.len();
    let half = d / 2;
    for i in 0..half {
        let theta = ROPE_BASE.powf(-2.0 * i as f64 / d as f64);
        let angle = position as f64 * theta;
        let (sin, cos) = angle.sin_cos();
        let a = v[2 * i];
        let b = v[2 * i + 1];
        v[2 * i] = a * cos - b * sin;
        v[2 * i + 1] = a * sin + b * cos;
    }
}

fn validate_tokens(weights: &ModelWeights, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("token sequence is empty".into()));
    }
    if tokens.len() > weights.config.max_seq_len {
        return Err(Error::InvalidInput(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            weights.config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= weights.config.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token id {bad} out of vocabulary (vocab_size {})",
            weights.config.vocab_size
        )));
    }
    Ok(())
}

/// Per-position next-token logits plus the routing trace. Position t's
/// output depends only on tokens 1..t (causal mask).
pub fn model_forward_logits(
    weights: &ModelWeights,
    tokens: &[usize],
) -> Result<(Vec<Vec<f64>>, RoutingTrace)> {
    validate_tokens(weights, tokens)?;
    let config = &weights.config;
    let t_len = tokens.len();
    let d = config.d_model;
    let scale = 1.0 / (d as f64).sqrt();

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| weights.token_embedding.row(t).to_vec())
        .collect();
    let mut trace = RoutingTrace::new(config);

    for (layer_idx, lw) in weights.layers.iter().enumerate() {
        // Attention sub-block.
        let normed: Vec<Vec<f64>> = x.iter().map(|h| rms_norm(h, &lw.norm1)).collect();
        let mut qs: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut ks: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let vs: Vec<Vec<f64>> = normed.iter().map(|h| vec_mat(h, &lw.w_v)).collect();
        for (pos, h) in normed.iter().enumerate() {
            let mut q = vec_mat(h, &lw.w_q);
            let mut k = vec_mat(h, &lw.w_k);
            apply_rope(&mut q, pos);
            apply_rope(&mut k, pos);
            qs.push(q);
            ks.push(k);
        }
        for t in 0..t_len {
            let scores: Vec<f64> = (0..=t).map(|u| dot(&qs[t], &ks[u]) * scale).collect();
            let attn = softmax(&scores);
            let mut ctx = vec![0.0f64; d];
            for (u, &p) in attn.iter().enumerate() {
                for (c, v) in ctx.iter_mut().zip(&vs[u]) {
                    *c += p * v;
                }
            }
            let out = vec_mat(&ctx, &lw.w_o);
            for (h, v) in x[t].iter_mut().zip(&out) {
                *h += v;
            }
        }

        // MoE sub-block.
        for t in 0..t_len {
            let normed2 = rms_norm(&x[t], &lw.norm2);
            let (y, entry) = moe_forward(weights, layer_idx, &normed2);
            for (h, v) in x[t].iter_mut().zip(&y) {
                *h += v;
            }
            trace.push_entry(t, layer_idx, entry);
        }
    }

    let logits: Vec<Vec<f64>> = x.iter().map(|h| vec_mat(h, &weights.output_head)).collect();
    Ok((logits, trace))
}

/// Per-position next-token log-probability vectors (log-softmax of the
/// logits) plus the routing trace.
pub fn model_forward(
    weights: &ModelWeights,
    tokens: &[usize],
) -> Result<(Vec<Vec<f64>>, RoutingTrace)> {
    let (logits, trace) = model_forward_logits(weights, tokens)?;
    let logprobs = logits.iter().map(|l| log_softmax(l)).collect();
    Ok((logprobs, trace))
}
