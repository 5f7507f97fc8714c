//! Binary model container, little-endian throughout.
//!
//! Layout: magic "MOEQ", format version u32 = 1, the eight config fields as
//! u32 in declaration order (vocab_size, d_model, n_layers, d_ff, n_shared,
//! n_routed, top_k, max_seq_len), then every tensor as 32-bit IEEE-754
//! row-major floats in fixed order: embedding; per layer: norm1, q, k, v, o,
//! norm2, gating, shared experts (up, gate, down) x m, routed experts
//! (up, gate, down) x n; output head. Readers reject unknown magic/version.

use super::{ExpertFfn, LayerWeights, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::bytes::{read_f32_vec, read_u32, write_f32_slice, write_u32};
use std::io::{Read, Write};
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 4] = b"MOEQ";
pub const MODEL_VERSION: u32 = 1;

fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    write_f32_slice(w, m.data())
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    let data = read_f32_vec(r, rows * cols)?;
    Matrix::from_vec(rows, cols, data)
}

pub(crate) fn write_config<W: Write>(w: &mut W, c: &ModelConfig) -> Result<()> {
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.d_ff,
        c.n_shared,
        c.n_routed,
        c.top_k,
        c.max_seq_len,
    ] {
        write_u32(w, u32::try_from(v).map_err(|_| Error::Format("config field overflow".into()))?)?;
    }
    Ok(())
}

pub(crate) fn read_config<R: Read>(r: &mut R) -> Result<ModelConfig> {
    let mut fields = [0u32; 8];
    for f in fields.iter_mut() {
        *f = read_u32(r)?;
    }
    let config = ModelConfig {
        vocab_size: fields[0] as usize,
        d_model: fields[1] as usize,
        n_layers: fields[2] as usize,
        d_ff: fields[3] as usize,
        n_shared: fields[4] as usize,
        n_routed: fields[5] as usize,
        top_k: fields[6] as usize,
        max_seq_len: fields[7] as usize,
    };
    config.validate()?;
    Ok(config)
}

fn write_expert<W: Write>(w: &mut W, e: &ExpertFfn) -> Result<()> {
    write_matrix(w, &e.w_up)?;
    write_matrix(w, &e.w_gate)?;
    write_matrix(w, &e.w_down)
}

fn read_expert<R: Read>(r: &mut R, c: &ModelConfig) -> Result<ExpertFfn> {
    Ok(ExpertFfn {
        w_up: read_matrix(r, c.d_model, c.d_ff)?,
        w_gate: read_matrix(r, c.d_model, c.d_ff)?,
        w_down: read_matrix(r, c.d_ff, c.d_model)?,
    })
}

pub(crate) fn write_fp_sections<W: Write>(w: &mut W, m: &ModelWeights) -> Result<()> {
    write_matrix(w, &m.token_embedding)?;
    for layer in &m.layers {
        write_f32_slice(w, &layer.norm1)?;
        write_matrix(w, &layer.w_q)?;
        write_matrix(w, &layer.w_k)?;
        write_matrix(w, &layer.w_v)?;
        write_matrix(w, &layer.w_o)?;
        write_f32_slice(w, &layer.norm2)?;
        write_matrix(w, &layer.gating)?;
        for e in &layer.shared {
            write_expert(w, e)?;
        }
        for e in &layer.routed {
            write_expert(w, e)?;
        }
    }
    write_matrix(w, &m.output_head)
}

pub fn save_model(weights: &ModelWeights, path: &Path) -> Result<()> {
    weights.validate()?;
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    write_u32(&mut out, MODEL_VERSION)?;
    write_config(&mut out, &weights.config)?;
    write_fp_sections(&mut out, weights)?;
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MODEL_MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let config = read_config(&mut r)?;

    let token_embedding = read_matrix(&mut r, config.vocab_size, config.d_model)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let norm1 = read_f32_vec(&mut r, config.d_model)?;
        let w_q = read_matrix(&mut r, config.d_model, config.d_model)?;
        let w_k = read_matrix(&mut r, config.d_model, config.d_model)?;
        let w_v = read_matrix(&mut r, config.d_model, config.d_model)?;
        let w_o = read_matrix(&mut r, config.d_model, config.d_model)?;
        let norm2 = read_f32_vec(&mut r, config.d_model)?;
        let gating = read_matrix(&mut r, config.d_model, config.n_experts())?;
        let shared = (0..config.n_shared)
            .map(|_| read_expert(&mut r, &config))
            .collect::<Result<Vec<_>>>()?;
        let routed = (0..config.n_routed)
            .map(|_| read_expert(&mut r, &config))
            .collect::<Result<Vec<_>>>()?;
        layers.push(LayerWeights { norm1, w_q, w_k, w_v, w_o, norm2, gating, shared, routed });
    }
    let output_head = read_matrix(&mut r, config.d_model, config.vocab_size)?;
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", r.len())));
    }

    let weights = ModelWeights { config, token_embedding, layers, output_head };
    weights.validate()?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::super::{forge_model, test_config};
    use super::*;

    #[test]
    fn model_round_trips_bit_identically() {
        let weights = forge_model(&test_config(), 42, 1.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&weights, &path).unwrap();
        let first = std::fs::read(&path).unwrap();

        // Reload and re-save: the f32 boundary is idempotent, so the bytes
        // match exactly.
        let loaded = load_model(&path).unwrap();
        let path2 = dir.path().join("model2.bin");
        save_model(&loaded, &path2).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second);
        assert_eq!(loaded.config, weights.config);
    }

    #[test]
    fn loader_rejects_bad_magic_and_version() {
        let weights = forge_model(&test_config(), 1, 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&weights, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad_magic = dir.path().join("bad_magic.bin");
        std::fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(load_model(&bad_magic), Err(Error::Format(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        let bad_version = dir.path().join("bad_version.bin");
        std::fs::write(&bad_version, &bytes).unwrap();
        assert!(matches!(load_model(&bad_version), Err(Error::Format(_))));
    }

    #[test]
    fn loader_rejects_truncation_and_trailing_bytes() {
        let weights = forge_model(&test_config(), 2, 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&weights, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("trunc.bin");
        std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_model(&truncated).is_err());

        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 3]);
        let padded = dir.path().join("padded.bin");
        std::fs::write(&padded, &extended).unwrap();
        assert!(load_model(&padded).is_err());
    }
}
