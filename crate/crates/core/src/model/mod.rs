//! Tiny mixture-of-experts transformer: configuration, weight forging,
//! forward passes with routing traces, perplexity and expert-usage stats.
//!
//! A block is RMS-norm -> single-head causal attention -> RMS-norm -> MoE
//! layer, with rotary phases on q/k for position. Shared experts are always
//! active; routed experts go through top-k gating over a joint softmax.

mod forward;
mod io;
mod stats;

pub use forward::{gate, model_forward, model_forward_logits, moe_forward, MoeTraceEntry};
pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub(crate) use io::{read_config as read_config_bytes, write_config as write_config_bytes};
pub use stats::{
    expert_usage, perplexity, ppl_from_logprobs, sigma_from_counts, ExpertUsageStats, RoutingTrace,
};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Architecture hyperparameters of the tiny MoE transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Shared experts, always active.
    pub n_shared: usize,
    /// Routed experts, top-k selected.
    pub n_routed: usize,
    pub top_k: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidInput("vocab_size must be >= 2".into()));
        }
        if self.d_model < 1 || self.d_ff < 1 || self.n_layers < 1 {
            return Err(Error::InvalidInput(
                "d_model, d_ff and n_layers must be >= 1".into(),
            ));
        }
        if self.top_k < 1 || self.top_k > self.n_routed {
            return Err(Error::InvalidInput(format!(
                "top_k must satisfy 1 <= k <= n_routed (k={}, n={})",
                self.top_k, self.n_routed
            )));
        }
        if self.max_seq_len < 1 {
            return Err(Error::InvalidInput("max_seq_len must be >= 1".into()));
        }
        Ok(())
    }

    /// Total expert count m + n; gate probabilities span this many entries,
    /// shared experts first.
    pub fn n_experts(&self) -> usize {
        self.n_shared + self.n_routed
    }
}

/// One expert feed-forward network: (x W_up) ⊙ silu(x W_gate) W_down.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFfn {
    /// d_model x d_ff
    pub w_up: Matrix,
    /// d_model x d_ff
    pub w_gate: Matrix,
    /// d_ff x d_model
    pub w_down: Matrix,
}

impl ExpertFfn {
    fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let ok = self.w_up.rows() == config.d_model
            && self.w_up.cols() == config.d_ff
            && self.w_gate.rows() == config.d_model
            && self.w_gate.cols() == config.d_ff
            && self.w_down.rows() == config.d_ff
            && self.w_down.cols() == config.d_model;
        if !ok {
            return Err(Error::DimensionMismatch("expert FFN shapes".into()));
        }
        Ok(())
    }

    /// Pre-down intermediate: (x W_up) ⊙ silu(x W_gate). Shared with the
    /// calibration capture so both paths see identical floating-point values.
    pub fn intermediate(&self, x: &[f64]) -> Vec<f64> {
        let d_ff = self.w_up.cols();
        let mut up = vec![0.0f64; d_ff];
        let mut gate = vec![0.0f64; d_ff];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let up_row = self.w_up.row(i);
            let gate_row = self.w_gate.row(i);
            for j in 0..d_ff {
                up[j] += xi * up_row[j];
                gate[j] += xi * gate_row[j];
            }
        }
        for j in 0..d_ff {
            up[j] *= silu(gate[j]);
        }
        up
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let hidden = self.intermediate(x);
        let d_model = self.w_down.cols();
        let mut out = vec![0.0f64; d_model];
        for (i, &hi) in hidden.iter().enumerate() {
            if hi == 0.0 {
                continue;
            }
            let down_row = self.w_down.row(i);
            for j in 0..d_model {
                out[j] += hi * down_row[j];
            }
        }
        out
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1: Vec<f64>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub norm2: Vec<f64>,
    /// d_model x (m + n), shared-expert columns first.
    pub gating: Matrix,
    pub shared: Vec<ExpertFfn>,
    pub routed: Vec<ExpertFfn>,
}

/// Full parameter set; immutable after forging.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// vocab_size x d_model
    pub token_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    /// d_model x vocab_size
    pub output_head: Matrix,
}

impl ModelWeights {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.token_embedding.rows() != c.vocab_size || self.token_embedding.cols() != c.d_model
        {
            return Err(Error::DimensionMismatch("token embedding".into()));
        }
        if self.output_head.rows() != c.d_model || self.output_head.cols() != c.vocab_size {
            return Err(Error::DimensionMismatch("output head".into()));
        }
        if self.layers.len() != c.n_layers {
            return Err(Error::DimensionMismatch("layer count".into()));
        }
        for layer in &self.layers {
            if layer.norm1.len() != c.d_model || layer.norm2.len() != c.d_model {
                return Err(Error::DimensionMismatch("norm gains".into()));
            }
            for w in [&layer.w_q, &layer.w_k, &layer.w_v, &layer.w_o] {
                if w.rows() != c.d_model || w.cols() != c.d_model {
                    return Err(Error::DimensionMismatch("attention projection".into()));
                }
            }
            if layer.gating.rows() != c.d_model || layer.gating.cols() != c.n_experts() {
                return Err(Error::DimensionMismatch("gating matrix".into()));
            }
            if layer.shared.len() != c.n_shared || layer.routed.len() != c.n_routed {
                return Err(Error::DimensionMismatch("expert counts".into()));
            }
            for e in layer.shared.iter().chain(layer.routed.iter()) {
                e.check_shapes(c)?;
            }
        }
        Ok(())
    }
}

/// Standard normal draw via Box-Muller; deterministic given the RNG state.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| std * gaussian(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("gaussian draws are finite")
}

/// Mean of the first embedding dimension. Token embeddings carry a positive
/// offset here so post-norm activations keep a consistent sign in one
/// coordinate; the router-skew ramp couples to it, making the skew a near
/// constant logit bias rather than a sign-symmetric one. Linear gating of
/// zero-mean activations cannot push any expert past 1/(2k) usage, which
/// would defeat the point of forging a skewed router.
const EMBED_DC_MEAN: f64 = 1.5;

/// Forges a model deterministically from (config, seed, router_skew).
///
/// Weights come from a scaled Gaussian init. Routed gating columns receive
/// an additive bias ramp proportional to `router_skew`: the column of routed
/// expert j gets router_skew * (j/(n-1) - 1/2) added on the embedding DC
/// row, so skew 0 keeps routing statistically balanced while larger values
/// push traffic toward the high end of the ramp.
pub fn forge_model(config: &ModelConfig, seed: u64, router_skew: f64) -> Result<ModelWeights> {
    config.validate()?;
    if !(router_skew >= 0.0) || !router_skew.is_finite() {
        return Err(Error::InvalidInput("router_skew must be finite and >= 0".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = config.d_model;
    let attn_std = 1.0 / (d as f64).sqrt();
    let ff_in_std = 1.0 / (d as f64).sqrt();
    let ff_out_std = 1.0 / (config.d_ff as f64).sqrt();

    let mut token_embedding = random_matrix(&mut rng, config.vocab_size, d, 1.0);
    for t in 0..config.vocab_size {
        let v = token_embedding.get(t, 0) + EMBED_DC_MEAN;
        token_embedding.set(t, 0, v);
    }

    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let norm1 = vec![1.0f64; d];
        let w_q = random_matrix(&mut rng, d, d, attn_std);
        let w_k = random_matrix(&mut rng, d, d, attn_std);
        let w_v = random_matrix(&mut rng, d, d, attn_std);
        let w_o = random_matrix(&mut rng, d, d, attn_std);
        let norm2 = vec![1.0f64; d];

        let mut gating = random_matrix(&mut rng, d, config.n_experts(), attn_std);
        if config.n_routed > 1 {
            let denom = (config.n_routed - 1) as f64;
            for j in 0..config.n_routed {
                let ramp = j as f64 / denom - 0.5;
                let col = config.n_shared + j;
                gating.set(0, col, gating.get(0, col) + router_skew * ramp);
            }
        }

        let forge_expert = |rng: &mut ChaCha20Rng| ExpertFfn {
            w_up: random_matrix(rng, d, config.d_ff, ff_in_std),
            w_gate: random_matrix(rng, d, config.d_ff, ff_in_std),
            w_down: random_matrix(rng, config.d_ff, d, ff_out_std),
        };
        let shared: Vec<ExpertFfn> = (0..config.n_shared).map(|_| forge_expert(&mut rng)).collect();
        let routed: Vec<ExpertFfn> = (0..config.n_routed).map(|_| forge_expert(&mut rng)).collect();

        layers.push(LayerWeights {
            norm1,
            w_q,
            w_k,
            w_v,
            w_o,
            norm2,
            gating,
            shared,
            routed,
        });
    }

    let output_head = random_matrix(&mut rng, d, config.vocab_size, attn_std);

    let weights = ModelWeights { config: *config, token_embedding, layers, output_head };
    weights.validate()?;
    Ok(weights)
}

#[cfg(test)]
pub(crate) fn test_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_layers: 2,
        d_ff: 24,
        n_shared: 1,
        n_routed: 4,
        top_k: 2,
        max_seq_len: 48,
    }
}
