//! Activation-aware per-input-channel scale search.
//!
//! Channel magnitudes a_j (mean |x(.,j)| over tokens) are raised to a grid
//! of exponents alpha in [0,1]; for each candidate the smoothed weights
//! w * diag(s) are quantized with round-to-nearest and the output loss is
//! evaluated on activations with columns divided by s, which equals the
//! output error of the effective weight. The scales are returned so the
//! caller can fold 1/s into the preceding computation.

use super::{
    dequantize, rtn_quantize, weighted_output_loss, ActivationBatch, QuantSpec, QuantizedTensor,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const SCALE_CLAMP_MIN: f64 = 1e-4;
const SCALE_CLAMP_MAX: f64 = 1e4;

/// Returns the winning channel scales and the quantized tensor of
/// w * diag(scales). Ties between grid points resolve toward smaller alpha;
/// channels with zero mean magnitude keep scale 1.
pub fn awq_scale_search(
    w: &Matrix,
    x: &ActivationBatch,
    spec: &QuantSpec,
    grid_size: usize,
) -> Result<(Vec<f64>, QuantizedTensor)> {
    let c = w.cols();
    if x.x.cols() != c {
        return Err(Error::DimensionMismatch(format!(
            "activation channels {} != weight input channels {c}",
            x.x.cols()
        )));
    }
    if grid_size == 0 {
        return Err(Error::InvalidInput("grid_size must be >= 1".into()));
    }

    let b = x.x.rows();
    let mut magnitude = vec![0.0f64; c];
    for t in 0..b {
        for (j, v) in x.x.row(t).iter().enumerate() {
            magnitude[j] += v.abs();
        }
    }
    for m in magnitude.iter_mut() {
        *m /= b as f64;
    }

    let mut best: Option<(f64, Vec<f64>, QuantizedTensor)> = None;
    for i in 0..grid_size {
        let alpha = if grid_size == 1 { 0.0 } else { i as f64 / (grid_size - 1) as f64 };
        let scales: Vec<f64> = magnitude
            .iter()
            .map(|&a| {
                if a == 0.0 {
                    1.0
                } else {
                    a.powf(alpha).clamp(SCALE_CLAMP_MIN, SCALE_CLAMP_MAX)
                }
            })
            .collect();

        let w_scaled = w.scale_cols(&scales)?;
        let q = rtn_quantize(&w_scaled, spec);
        let w_hat = dequantize(&q);
        let inv: Vec<f64> = scales.iter().map(|s| 1.0 / s).collect();
        let x_scaled = x.x.scale_cols(&inv)?;
        let loss =
            weighted_output_loss(&w_scaled, &w_hat, &x_scaled, x.token_weights.as_deref())?;

        let better = match &best {
            None => true,
            Some((best_loss, _, _)) => loss < *best_loss,
        };
        if better {
            best = Some((loss, scales, q));
        }
    }

    let (_, scales, q) = best.expect("grid has at least one point");
    Ok((scales, q))
}
