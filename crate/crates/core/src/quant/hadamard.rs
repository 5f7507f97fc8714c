//! Orthogonal Walsh-Hadamard rotation of the input-channel axis.
//!
//! Right-multiplying weights by H_c / sqrt(c) spreads outliers across
//! channels without changing layer outputs, as long as activations receive
//! the same transform: w X^T = (w T)(X T)^T because T is orthogonal. The
//! scaled transform is its own inverse.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// In-place fast Walsh-Hadamard butterflies followed by 1/sqrt(len) scaling.
fn fwht_normalized(values: &mut [f64]) {
    let n = values.len();
    let mut stride = 1;
    while stride < n {
        let mut i = 0;
        while i < n {
            for j in i..i + stride {
                let a = values[j];
                let b = values[j + stride];
                values[j] = a + b;
                values[j + stride] = a - b;
            }
            i += stride * 2;
        }
        stride *= 2;
    }
    let scale = 1.0 / (n as f64).sqrt();
    for v in values.iter_mut() {
        *v *= scale;
    }
}

/// Returns w * (H_c / sqrt(c)) where c is the input-channel (column) count.
/// The same function applies the paired transform to activation batches,
/// since H_c is symmetric. Columns must number a power of two.
pub fn hadamard_preprocess(w: &Matrix) -> Result<Matrix> {
    let c = w.cols();
    if c == 0 || !c.is_power_of_two() {
        return Err(Error::UnsupportedShape(format!(
            "hadamard transform needs a power-of-two column count, got {c}"
        )));
    }
    let mut out = w.clone();
    for r in 0..out.rows() {
        fwht_normalized(out.row_mut(r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn rejects_non_power_of_two() {
        let w = Matrix::zeros(2, 6);
        assert!(matches!(
            hadamard_preprocess(&w),
            Err(Error::UnsupportedShape(_))
        ));
    }

    #[test]
    fn double_application_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for &c in &[1usize, 2, 8, 32] {
            let w = random_matrix(&mut rng, 5, c);
            let twice = hadamard_preprocess(&hadamard_preprocess(&w).unwrap()).unwrap();
            for (a, b) in twice.data().iter().zip(w.data()) {
                assert!((a - b).abs() <= 1e-10, "c={c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn preserves_frobenius_norm() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let w = random_matrix(&mut rng, 7, 16);
        let t = hadamard_preprocess(&w).unwrap();
        assert!((t.frobenius_norm() - w.frobenius_norm()).abs() <= 1e-10 * w.frobenius_norm());
    }

    #[test]
    fn preserves_layer_outputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..10 {
            let w = random_matrix(&mut rng, 6, 16);
            let x = random_matrix(&mut rng, 9, 16);
            let wt = hadamard_preprocess(&w).unwrap();
            let xt = hadamard_preprocess(&x).unwrap();
            let direct = matmul(&w, &x.transpose()).unwrap();
            let rotated = matmul(&wt, &xt.transpose()).unwrap();
            let mut num = 0.0f64;
            for (a, b) in rotated.data().iter().zip(direct.data()) {
                num += (a - b) * (a - b);
            }
            assert!(num.sqrt() <= 1e-9 * direct.frobenius_norm());
        }
    }

    #[test]
    fn matches_explicit_hadamard_matrix() {
        // Build H_4 explicitly and compare against the butterfly transform.
        let h4 = Matrix::from_rows(&[
            vec![1.0, 1.0, 1.0, 1.0],
            vec![1.0, -1.0, 1.0, -1.0],
            vec![1.0, 1.0, -1.0, -1.0],
            vec![1.0, -1.0, -1.0, 1.0],
        ])
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let w = random_matrix(&mut rng, 3, 4);
        let expected = matmul(&w, &h4).unwrap();
        let got = hadamard_preprocess(&w).unwrap();
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b / 2.0).abs() <= 1e-12);
        }
    }
}
