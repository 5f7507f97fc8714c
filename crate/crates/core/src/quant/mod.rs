//! Per-channel symmetric weight quantization: round-to-nearest baseline,
//! Hessian-compensated column sweep, activation-aware scale search, plus
//! the quantization loss, input Gram Hessian and Walsh-Hadamard rotation.
//!
//! Weight matrices here are output-major: o rows (output channels), c
//! columns (input channels). Steps are per output channel.

mod awq;
mod gptq;
mod hadamard;

pub use awq::awq_scale_search;
pub use gptq::gptq_quantize;
pub use hadamard::hadamard_preprocess;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Bit-width and the symmetric clamp bounds it induces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: u32,
    pub q_min: i32,
    pub q_max: i32,
}

impl QuantSpec {
    /// Symmetric range: q_max = 2^(bits-1) - 1, q_min = -q_max. The extra
    /// negative code is dropped for true symmetry.
    pub fn new(bits: u32) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::InvalidInput(format!(
                "bits must be in 2..=8, got {bits}"
            )));
        }
        let q_max = (1i32 << (bits - 1)) - 1;
        Ok(Self { bits, q_min: -q_max, q_max })
    }
}

/// Integer codes with per-output-channel steps.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    /// Row-major o x c codes.
    codes: Vec<i8>,
    /// One positive step per output channel (row).
    steps: Vec<f64>,
}

impl QuantizedTensor {
    pub fn new(rows: usize, cols: usize, codes: Vec<i8>, steps: Vec<f64>) -> Result<Self> {
        if codes.len() != rows * cols || steps.len() != rows {
            return Err(Error::DimensionMismatch("quantized tensor".into()));
        }
        if !steps.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidInput("steps must be positive and finite".into()));
        }
        Ok(Self { rows, cols, codes, steps })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> i8 {
        self.codes[r * self.cols + c]
    }

    pub fn in_range(&self, spec: &QuantSpec) -> bool {
        self.codes
            .iter()
            .all(|&q| (q as i32) >= spec.q_min && (q as i32) <= spec.q_max)
    }
}

/// Activation rows (b tokens x c channels) with optional per-token weights
/// used by affinity-aware objectives.
#[derive(Debug, Clone)]
pub struct ActivationBatch {
    pub x: Matrix,
    pub token_weights: Option<Vec<f64>>,
}

impl ActivationBatch {
    pub fn new(x: Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::InvalidInput("activation batch is empty".into()));
        }
        Ok(Self { x, token_weights: None })
    }

    pub fn weighted(x: Matrix, weights: Vec<f64>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::InvalidInput("activation batch is empty".into()));
        }
        if weights.len() != x.rows() {
            return Err(Error::DimensionMismatch(
                "one weight per activation row required".into(),
            ));
        }
        if !weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::InvalidInput("token weights must be positive".into()));
        }
        Ok(Self { x, token_weights: Some(weights) })
    }
}

/// Per-row steps: max|w(r,.)| / q_max, with 1 for all-zero rows (their codes
/// are all zero anyway).
pub fn compute_steps(w: &Matrix, spec: &QuantSpec) -> Vec<f64> {
    (0..w.rows())
        .map(|r| {
            let max_abs = w.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if max_abs == 0.0 {
                1.0
            } else {
                max_abs / spec.q_max as f64
            }
        })
        .collect()
}

#[inline]
pub(crate) fn quantize_value(v: f64, step: f64, spec: &QuantSpec) -> i8 {
    let q = (v / step).round_ties_even();
    let q = q.max(spec.q_min as f64).min(spec.q_max as f64);
    q as i8
}

/// codes = clamp(round-half-to-even(w / s), q_min, q_max).
pub fn quantize(w: &Matrix, steps: &[f64], spec: &QuantSpec) -> Result<QuantizedTensor> {
    if steps.len() != w.rows() {
        return Err(Error::DimensionMismatch("one step per row required".into()));
    }
    if !steps.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::InvalidInput("steps must be positive and finite".into()));
    }
    let mut codes = Vec::with_capacity(w.rows() * w.cols());
    for r in 0..w.rows() {
        let s = steps[r];
        for &v in w.row(r) {
            codes.push(quantize_value(v, s, spec));
        }
    }
    QuantizedTensor::new(w.rows(), w.cols(), codes, steps.to_vec())
}

/// W_hat(r,j) = codes(r,j) * s_r.
pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let mut out = Matrix::zeros(q.rows, q.cols);
    for r in 0..q.rows {
        let s = q.steps[r];
        let row = out.row_mut(r);
        for (j, v) in row.iter_mut().enumerate() {
            *v = q.codes[r * q.cols + j] as f64 * s;
        }
    }
    out
}

/// Round-to-nearest baseline: steps from the matrix itself, no data
/// dependence.
pub fn rtn_quantize(w: &Matrix, spec: &QuantSpec) -> QuantizedTensor {
    let steps = compute_steps(w, spec);
    quantize(w, &steps, spec).expect("computed steps are positive")
}

/// Sum over tokens of the squared output error: ||(w - w_hat) X^T||_F^2.
/// Optional per-token weights on the batch are ignored here; see the
/// affinity-aware loss for the weighted form.
pub fn quant_loss(w: &Matrix, w_hat: &Matrix, x: &ActivationBatch) -> Result<f64> {
    weighted_output_loss(w, w_hat, &x.x, None)
}

/// Shared kernel for the plain and token-weighted output losses.
pub(crate) fn weighted_output_loss(
    w: &Matrix,
    w_hat: &Matrix,
    x: &Matrix,
    token_weights: Option<&[f64]>,
) -> Result<f64> {
    if w.rows() != w_hat.rows() || w.cols() != w_hat.cols() {
        return Err(Error::DimensionMismatch("w and w_hat shapes differ".into()));
    }
    if x.cols() != w.cols() {
        return Err(Error::DimensionMismatch(format!(
            "activation channels {} != weight input channels {}",
            x.cols(),
            w.cols()
        )));
    }
    if let Some(tw) = token_weights {
        if tw.len() != x.rows() {
            return Err(Error::DimensionMismatch("one weight per token required".into()));
        }
    }
    let o = w.rows();
    let c = w.cols();
    let mut diff = Vec::with_capacity(o * c);
    for i in 0..o * c {
        diff.push(w.data()[i] - w_hat.data()[i]);
    }
    let mut total = 0.0f64;
    for (i, xrow) in (0..x.rows()).map(|i| (i, x.row(i))) {
        let mut sq = 0.0f64;
        for r in 0..o {
            let drow = &diff[r * c..(r + 1) * c];
            let mut acc = 0.0f64;
            for (d, xv) in drow.iter().zip(xrow) {
                acc += d * xv;
            }
            sq += acc * acc;
        }
        total += match token_weights {
            Some(tw) => tw[i] * sq,
            None => sq,
        };
    }
    Ok(total)
}

/// Input Gram matrix over the token batch: H = X^T X (c x c), symmetric PSD.
pub fn hessian(x: &ActivationBatch) -> Matrix {
    gram(&x.x)
}

pub(crate) fn gram(x: &Matrix) -> Matrix {
    let c = x.cols();
    let mut h = Matrix::zeros(c, c);
    for t in 0..x.rows() {
        let row = x.row(t);
        for i in 0..c {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            for j in i..c {
                let v = h.get(i, j) + xi * row[j];
                h.set(i, j, v);
            }
        }
    }
    // Mirror the upper triangle: symmetric by construction.
    for i in 0..c {
        for j in (i + 1)..c {
            let v = h.get(i, j);
            h.set(j, i, v);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cholesky, matmul};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        let data: Vec<f64> =
            (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn spec_symmetric_range() {
        let spec = QuantSpec::new(4).unwrap();
        assert_eq!((spec.q_min, spec.q_max), (-7, 7));
        let spec = QuantSpec::new(8).unwrap();
        assert_eq!((spec.q_min, spec.q_max), (-127, 127));
        assert!(QuantSpec::new(1).is_err());
        assert!(QuantSpec::new(9).is_err());
    }

    #[test]
    fn steps_direct_rule() {
        let spec = QuantSpec::new(4).unwrap();
        let w = Matrix::from_rows(&[vec![0.5, -1.0, 0.25]]).unwrap();
        let steps = compute_steps(&w, &spec);
        assert!((steps[0] - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn steps_zero_row_convention_and_homogeneity() {
        let spec = QuantSpec::new(4).unwrap();
        let w = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.3, -0.6]]).unwrap();
        let steps = compute_steps(&w, &spec);
        assert_eq!(steps[0], 1.0);
        let scaled = w.scale_rows(&[1.0, 2.0]).unwrap();
        let steps2 = compute_steps(&scaled, &spec);
        assert!((steps2[1] - 2.0 * steps[1]).abs() < 1e-15);
    }

    #[test]
    fn quantize_half_to_even_codes() {
        // 0.5/(1/7) = 3.5 rounds to 4, -1/(1/7) = -7, 0.25/(1/7) = 1.75 -> 2.
        let spec = QuantSpec::new(4).unwrap();
        let w = Matrix::from_rows(&[vec![0.5, -1.0, 0.25]]).unwrap();
        let q = quantize(&w, &[1.0 / 7.0], &spec).unwrap();
        assert_eq!(q.codes(), &[4, -7, 2]);
    }

    #[test]
    fn quantize_saturates() {
        let spec = QuantSpec::new(4).unwrap();
        let w = Matrix::from_rows(&[vec![10.0]]).unwrap();
        let q = quantize(&w, &[1.0], &spec).unwrap();
        assert_eq!(q.codes(), &[7]);
    }

    #[test]
    fn quantize_rejects_bad_steps() {
        let spec = QuantSpec::new(4).unwrap();
        let w = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(quantize(&w, &[0.0], &spec).is_err());
        assert!(quantize(&w, &[-1.0], &spec).is_err());
    }

    #[test]
    fn on_grid_round_trip_is_exact() {
        let spec = QuantSpec::new(4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..20 {
            let rows = rng.gen_range(1..6);
            let cols = rng.gen_range(1..6);
            let steps: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.01..1.0)).collect();
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| {
                    let code = rng.gen_range(spec.q_min..=spec.q_max) as f64;
                    code * steps[i / cols]
                })
                .collect();
            let w = Matrix::from_vec(rows, cols, data).unwrap();
            let q = quantize(&w, &steps, &spec).unwrap();
            let back = dequantize(&q);
            assert_eq!(back.data(), w.data());
        }
    }

    #[test]
    fn dequantize_zero_codes() {
        let q = QuantizedTensor::new(2, 2, vec![0; 4], vec![0.5, 0.25]).unwrap();
        assert!(dequantize(&q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rounding_bound_holds() {
        let spec = QuantSpec::new(4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..50 {
            let w = random_matrix(&mut rng, 6, 8, 1.0);
            let q = rtn_quantize(&w, &spec);
            let back = dequantize(&q);
            for r in 0..6 {
                for c in 0..8 {
                    let err = (w.get(r, c) - back.get(r, c)).abs();
                    assert!(err <= q.steps()[r] / 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn rtn_identical_rows_identical_codes() {
        let spec = QuantSpec::new(3).unwrap();
        let row = vec![0.4, -0.2, 0.7, 0.1];
        let w = Matrix::from_rows(&[row.clone(), row]).unwrap();
        let q = rtn_quantize(&w, &spec);
        assert_eq!(&q.codes()[..4], &q.codes()[4..]);
    }

    #[test]
    fn loss_zero_when_identical() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let w = random_matrix(&mut rng, 4, 6, 1.0);
        let x = ActivationBatch::new(random_matrix(&mut rng, 5, 6, 1.0)).unwrap();
        assert_eq!(quant_loss(&w, &w, &x).unwrap(), 0.0);
    }

    #[test]
    fn loss_identity_activations() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let w = random_matrix(&mut rng, 4, 4, 1.0);
        let w_hat = random_matrix(&mut rng, 4, 4, 1.0);
        let x = ActivationBatch::new(Matrix::identity(4)).unwrap();
        let loss = quant_loss(&w, &w_hat, &x).unwrap();
        let mut frob = 0.0;
        for (a, b) in w.data().iter().zip(w_hat.data()) {
            frob += (a - b) * (a - b);
        }
        assert!((loss - frob).abs() <= 1e-12 * frob.max(1.0));
    }

    #[test]
    fn loss_matches_token_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..10 {
            let w = random_matrix(&mut rng, 5, 7, 1.0);
            let w_hat = random_matrix(&mut rng, 5, 7, 1.0);
            let xm = random_matrix(&mut rng, 9, 7, 1.0);
            let x = ActivationBatch::new(xm.clone()).unwrap();
            let loss = quant_loss(&w, &w_hat, &x).unwrap();

            // Per-token oracle: sum_i ||(w - w_hat) x_i||^2.
            let mut oracle = 0.0f64;
            for t in 0..xm.rows() {
                for r in 0..w.rows() {
                    let mut acc = 0.0;
                    for c in 0..w.cols() {
                        acc += (w.get(r, c) - w_hat.get(r, c)) * xm.get(t, c);
                    }
                    oracle += acc * acc;
                }
            }
            assert!((loss - oracle).abs() <= 1e-9 * oracle.max(1e-30));
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn loss_invariant_under_joint_row_permutation() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let w = random_matrix(&mut rng, 4, 5, 1.0);
        let w_hat = random_matrix(&mut rng, 4, 5, 1.0);
        let x = ActivationBatch::new(random_matrix(&mut rng, 6, 5, 1.0)).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permute = |m: &Matrix| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&r| m.row(r).to_vec()).collect();
            Matrix::from_rows(&rows).unwrap()
        };
        let a = quant_loss(&w, &w_hat, &x).unwrap();
        let b = quant_loss(&permute(&w), &permute(&w_hat), &x).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn hessian_rank_one() {
        let x = ActivationBatch::new(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        let h = hessian(&x);
        assert_eq!(h.data(), &[1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn hessian_orthonormal_tokens() {
        let x = ActivationBatch::new(
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let h = hessian(&x);
        assert_eq!(h.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn hessian_symmetric_and_psd() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..10 {
            let xm = random_matrix(&mut rng, 12, 6, 1.0);
            let h = hessian(&ActivationBatch::new(xm.clone()).unwrap());
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(h.get(i, j), h.get(j, i));
                }
            }
            // PSD oracle: H + 1e-9 I admits a Cholesky factorization, so the
            // minimum eigenvalue is >= -1e-9.
            let mut shifted = h.clone();
            for i in 0..6 {
                shifted.set(i, i, shifted.get(i, i) + 1e-9);
            }
            assert!(cholesky(&shifted).is_ok());
            // Cross-check against the dense product X^T X.
            let dense = matmul(&xm.transpose(), &xm).unwrap();
            for (a, b) in h.data().iter().zip(dense.data()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
