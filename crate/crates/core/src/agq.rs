//! Affinity-guided calibration: captures per-token gate coefficients next to
//! expert-input activations during calibration forward passes, and derives
//! the affinity-weighted quantization loss and gate-aware Hessian consumed
//! by the quantization solvers.
//!
//! Every token deposits its activation and gate probability into the traces
//! of each selected routed expert and each shared expert, at all three
//! linear positions: up and gate see the expert input, down sees the true
//! intermediate activation, all with the same affinity.

use crate::ebss::CalibrationSet;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{model_forward, ModelWeights};
use crate::quant::{
    awq_scale_search, gptq_quantize, gram, weighted_output_loss, ActivationBatch, QuantSpec,
    QuantizedTensor,
};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

pub const TRACE_MAGIC: &[u8; 5] = b"MOEQT";

/// Which linear of an expert a trace belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LinearPos {
    Up,
    Gate,
    Down,
}

impl LinearPos {
    pub const ALL: [LinearPos; 3] = [LinearPos::Up, LinearPos::Gate, LinearPos::Down];

    fn to_u8(self) -> u8 {
        match self {
            LinearPos::Up => 0,
            LinearPos::Gate => 1,
            LinearPos::Down => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(LinearPos::Up),
            1 => Ok(LinearPos::Gate),
            2 => Ok(LinearPos::Down),
            other => Err(Error::Format(format!("unknown linear position {other}"))),
        }
    }
}

/// (layer, expert, linear) key; experts are indexed 0..m+n with the shared
/// experts first, matching the gate probability layout.
pub type TraceKey = (usize, usize, LinearPos);

/// Captured activations of one (layer, expert, linear) slot with paired
/// gate affinities, one per row.
#[derive(Debug, Clone)]
pub struct AffinityTrace {
    pub layer: usize,
    pub expert: usize,
    pub pos: LinearPos,
    rows: Vec<Vec<f64>>,
    affinities: Vec<f64>,
}

impl AffinityTrace {
    pub fn new(layer: usize, expert: usize, pos: LinearPos) -> Self {
        Self { layer, expert, pos, rows: Vec::new(), affinities: Vec::new() }
    }

    /// Assembles a trace from raw rows. Affinities must be positive and
    /// finite; values above 1 are accepted so synthetic traces can be built
    /// in tests, while capture itself only ever produces softmax outputs.
    pub fn from_parts(
        layer: usize,
        expert: usize,
        pos: LinearPos,
        rows: Vec<Vec<f64>>,
        affinities: Vec<f64>,
    ) -> Result<Self> {
        let mut trace = Self::new(layer, expert, pos);
        if rows.len() != affinities.len() {
            return Err(Error::DimensionMismatch(
                "row and affinity counts differ".into(),
            ));
        }
        for (row, c) in rows.into_iter().zip(affinities) {
            trace.push(row, c)?;
        }
        Ok(trace)
    }

    pub fn push(&mut self, row: Vec<f64>, affinity: f64) -> Result<()> {
        if !affinity.is_finite() || affinity <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "affinity must be positive and finite, got {affinity}"
            )));
        }
        if let Some(first) = self.rows.first() {
            if first.len() != row.len() {
                return Err(Error::DimensionMismatch("trace row lengths differ".into()));
            }
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("trace row has non-finite values".into()));
        }
        self.rows.push(row);
        self.affinities.push(affinity);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn affinities(&self) -> &[f64] {
        &self.affinities
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_rows(&self.rows)
    }

    /// Activation batch carrying the affinities as per-token weights.
    pub fn to_weighted_batch(&self) -> Result<ActivationBatch> {
        ActivationBatch::weighted(self.to_matrix()?, self.affinities.clone())
    }
}

/// Runs one forward pass per calibration sequence and collects per-slot
/// traces. Routed experts record only tokens that selected them; shared
/// experts record every token.
pub fn capture_calibration(
    model: &ModelWeights,
    calib: &CalibrationSet,
) -> Result<BTreeMap<TraceKey, AffinityTrace>> {
    if calib.sequences.is_empty() {
        return Err(Error::InvalidInput("calibration set is empty".into()));
    }
    let config = &model.config;
    let mut traces: BTreeMap<TraceKey, AffinityTrace> = BTreeMap::new();

    let mut deposit = |layer: usize, expert: usize, pos: LinearPos, row: Vec<f64>, c: f64| {
        traces
            .entry((layer, expert, pos))
            .or_insert_with(|| AffinityTrace::new(layer, expert, pos))
            .push(row, c)
    };

    for seq in &calib.sequences {
        let (_, trace) = model_forward(model, seq)?;
        for t in 0..trace.n_tokens() {
            for layer in 0..config.n_layers {
                let entry = trace.entry(t, layer);
                let input = &entry.expert_input;
                for (i, &c) in entry.shared_gates.iter().enumerate() {
                    let inter = model.layers[layer].shared[i].intermediate(input);
                    deposit(layer, i, LinearPos::Up, input.clone(), c)?;
                    deposit(layer, i, LinearPos::Gate, input.clone(), c)?;
                    deposit(layer, i, LinearPos::Down, inter, c)?;
                }
                for (&j, &c) in entry.selected.iter().zip(&entry.selected_gates) {
                    let expert = config.n_shared + j;
                    let inter = model.layers[layer].routed[j].intermediate(input);
                    deposit(layer, expert, LinearPos::Up, input.clone(), c)?;
                    deposit(layer, expert, LinearPos::Gate, input.clone(), c)?;
                    deposit(layer, expert, LinearPos::Down, inter, c)?;
                }
            }
        }
    }
    Ok(traces)
}

/// Gate-aware Hessian: H = sum_i c_i x_i x_i^T, realized by scaling each row
/// by sqrt(c_i) before forming the Gram matrix. Symmetric PSD.
pub fn affinity_hessian(trace: &AffinityTrace) -> Result<Matrix> {
    if trace.is_empty() {
        return Err(Error::InvalidInput("affinity trace is empty".into()));
    }
    let mut x = trace.to_matrix()?;
    for (r, &c) in trace.affinities.iter().enumerate() {
        let s = c.sqrt();
        for v in x.row_mut(r) {
            *v *= s;
        }
    }
    Ok(gram(&x))
}

/// Affinity-weighted output loss: sum_i c_i ||(w - w_hat) x_i||^2.
pub fn affinity_loss(w: &Matrix, w_hat: &Matrix, trace: &AffinityTrace) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::InvalidInput("affinity trace is empty".into()));
    }
    let x = trace.to_matrix()?;
    weighted_output_loss(w, w_hat, &x, Some(&trace.affinities))
}

/// Hessian-compensated sweep against the gate-aware Hessian.
pub fn agq_gptq(
    w: &Matrix,
    trace: &AffinityTrace,
    spec: &QuantSpec,
    lambda_frac: f64,
) -> Result<QuantizedTensor> {
    let h = affinity_hessian(trace)?;
    gptq_quantize(w, &h, spec, lambda_frac)
}

/// Scale search with the affinity-weighted loss as the objective.
pub fn agq_awq(
    w: &Matrix,
    trace: &AffinityTrace,
    spec: &QuantSpec,
    grid_size: usize,
) -> Result<(Vec<f64>, QuantizedTensor)> {
    let batch = trace.to_weighted_batch()?;
    awq_scale_search(w, &batch, spec, grid_size)
}

/// Writes traces to the binary dump format: magic "MOEQT", then per-trace
/// records (layer u32, expert u32, linear position u8, row count u32, dim
/// u32, rows as 32-bit floats, affinities as 32-bit floats).
pub fn write_trace_dump(traces: &BTreeMap<TraceKey, AffinityTrace>, path: &Path) -> Result<()> {
    use crate::bytes::{write_f32_slice, write_u32};
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(TRACE_MAGIC);
    for ((layer, expert, pos), trace) in traces {
        write_u32(&mut out, *layer as u32)?;
        write_u32(&mut out, *expert as u32)?;
        out.push(pos.to_u8());
        write_u32(&mut out, trace.len() as u32)?;
        write_u32(&mut out, trace.dim() as u32)?;
        for row in trace.rows() {
            write_f32_slice(&mut out, row)?;
        }
        write_f32_slice(&mut out, trace.affinities())?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a trace dump written by [`write_trace_dump`].
pub fn read_trace_dump(path: &Path) -> Result<BTreeMap<TraceKey, AffinityTrace>> {
    use crate::bytes::{read_f32_vec, read_u32};
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != TRACE_MAGIC {
        return Err(Error::Format("bad trace dump magic".into()));
    }
    let mut traces = BTreeMap::new();
    while !r.is_empty() {
        let layer = read_u32(&mut r)? as usize;
        let expert = read_u32(&mut r)? as usize;
        let mut pos_byte = [0u8; 1];
        r.read_exact(&mut pos_byte)?;
        let pos = LinearPos::from_u8(pos_byte[0])?;
        let count = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            rows.push(read_f32_vec(&mut r, dim)?);
        }
        let affinities = read_f32_vec(&mut r, count)?;
        let trace = AffinityTrace::from_parts(layer, expert, pos, rows, affinities)?;
        traces.insert((layer, expert, pos), trace);
    }
    Ok(traces)
}
