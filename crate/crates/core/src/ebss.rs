//! Expert-balanced self-sampling: generates calibration sequences from the
//! model itself via a width-w branch search scored by average negative
//! log-probability plus an expert-imbalance penalty, with the imbalance
//! update deferred to the forward pass that consumes each committed token.
//!
//! Each search seeds its w branches with distinct start tokens drawn from
//! the model's first-token distribution (conditioned on a designated
//! begin-of-sequence token, id 0). Every step runs one forward pass per
//! branch, scores all vocabulary candidates, and keeps the w lowest-scoring
//! extensions, so a search costs exactly 1 + w * (target_len - 1) passes.

use crate::error::{Error, Result};
use crate::model::{
    expert_usage, model_forward, ppl_from_logprobs, sigma_from_counts, ModelWeights, RoutingTrace,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Begin-of-sequence token used to condition the first-token distribution.
pub const BOS_TOKEN: usize = 0;

/// Search hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EbssConfig {
    /// Branch count w.
    pub width: usize,
    /// Tokens per emitted sequence.
    pub target_len: usize,
    /// Number of sequences in the finished calibration set.
    pub n_sequences: usize,
    /// Imbalance temperature; larger values weaken the balance term.
    pub tau: f64,
    pub seed: u64,
}

impl Default for EbssConfig {
    fn default() -> Self {
        // width 4 and tau 1.2 are the tuned defaults.
        Self { width: 4, target_len: 32, n_sequences: 16, tau: 1.2, seed: 0 }
    }
}

impl EbssConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 1 {
            return Err(Error::InvalidInput("width must be >= 1".into()));
        }
        if self.target_len < 2 {
            return Err(Error::InvalidInput("target_len must be >= 2".into()));
        }
        if self.n_sequences < 1 {
            return Err(Error::InvalidInput("n_sequences must be >= 1".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidInput("tau must be positive and finite".into()));
        }
        Ok(())
    }
}

/// One search branch: committed tokens, cumulative log-probability of the
/// whole sequence (first token conditioned on BOS), per-layer routed usage
/// counters covering every token whose routing is already known, and the
/// balance sigma cached from those counters.
#[derive(Debug, Clone)]
pub struct Branch {
    pub tokens: Vec<usize>,
    pub r_s: f64,
    pub usage_counters: Vec<Vec<u64>>,
    pub cached_sigma: f64,
}

impl Branch {
    fn seeded(token: usize, logp: f64, n_layers: usize, n_routed: usize) -> Self {
        Self {
            tokens: vec![token],
            r_s: logp,
            usage_counters: vec![vec![0; n_routed]; n_layers],
            cached_sigma: 0.0,
        }
    }

    /// Folds the routing of the token at `position` (0 = BOS) of a forward
    /// trace into the counters and refreshes the cached sigma.
    fn absorb_routing(&mut self, trace: &RoutingTrace, position: usize) {
        for layer in 0..trace.n_layers() {
            for &j in &trace.entry(position, layer).selected {
                self.usage_counters[layer][j] += 1;
            }
        }
        self.cached_sigma = sigma_from_counts(&self.usage_counters);
    }
}

/// Cumulative log-probability after appending a token with log-prob `logp_v`.
pub fn extend_logprob(branch: &Branch, logp_v: f64) -> f64 {
    branch.r_s + logp_v
}

/// Pruning score of extending `branch` by a token with log-prob `logp_v`:
/// average negative log-probability of the extended sequence plus the
/// balance penalty sigma/tau of the prefix. The candidate token's routing is
/// deliberately excluded (deferred imbalance).
pub fn score_candidate(branch: &Branch, logp_v: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidInput("tau must be positive and finite".into()));
    }
    let len = branch.tokens.len();
    Ok(-(extend_logprob(branch, logp_v)) / (len + 1) as f64 + branch.cached_sigma / tau)
}

/// A scored branch extension awaiting pruning.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    /// Index of the parent branch in the current branch set.
    pub parent: usize,
    pub token: usize,
    pub logp: f64,
    pub score: f64,
}

/// Keeps the w candidates with the lowest score; ties break by lower token
/// id, then lower parent index. Returns the surviving branches plus a flag
/// set when fewer than w candidates were available.
pub fn prune_topw(parents: &[Branch], candidates: &[Candidate], w: usize) -> (Vec<Branch>, bool) {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let ca = &candidates[a];
        let cb = &candidates[b];
        ca.score
            .total_cmp(&cb.score)
            .then(ca.token.cmp(&cb.token))
            .then(ca.parent.cmp(&cb.parent))
    });
    let survivors: Vec<Branch> = order
        .into_iter()
        .take(w)
        .map(|i| {
            let c = &candidates[i];
            let parent = &parents[c.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(c.token);
            Branch {
                tokens,
                r_s: parent.r_s + c.logp,
                usage_counters: parent.usage_counters.clone(),
                cached_sigma: parent.cached_sigma,
            }
        })
        .collect();
    let warning = candidates.len() < w;
    (survivors, warning)
}

/// Provenance of a calibration set.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Ebss { width: usize, tau: f64, seed: u64 },
    External,
}

/// Balance and fit statistics of a finished calibration set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetSummary {
    /// Expert-balance sigma measured over fresh forward passes of the
    /// emitted sequences.
    pub sigma: f64,
    /// Mean per-sequence perplexity (first token unscored).
    pub mean_ppl: f64,
}

/// A finished set of token sequences.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<usize>>,
    pub provenance: Provenance,
    pub summary: Option<SetSummary>,
}

/// Result of a generation run, with the instrumented forward-pass counts
/// that substantiate the linear search cost.
#[derive(Debug, Clone)]
pub struct EbssOutput {
    pub set: CalibrationSet,
    /// Forward passes consumed by each independent search; summary passes
    /// are not included.
    pub passes_per_search: Vec<u64>,
}

/// Samples `count` distinct tokens without replacement from a categorical
/// distribution.
fn sample_distinct(rng: &mut ChaCha20Rng, probs: &[f64], count: usize) -> Vec<usize> {
    let mut remaining = probs.to_vec();
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = remaining.iter().sum();
        let mut dart = rng.gen::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (i, &p) in remaining.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            dart -= p;
            if dart <= 0.0 {
                pick = i;
                break;
            }
        }
        // Guard against landing on an already-chosen slot through rounding.
        if remaining[pick] <= 0.0 {
            pick = remaining
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(i, _)| i)
                .next_back()
                .expect("fewer choices than vocabulary");
        }
        remaining[pick] = 0.0;
        chosen.push(pick);
    }
    chosen
}

/// Runs ceil(n_sequences / w) independent searches and emits the surviving
/// branches of each as calibration sequences.
pub fn ebss_generate(model: &ModelWeights, config: &EbssConfig) -> Result<EbssOutput> {
    config.validate()?;
    let mc = &model.config;
    if mc.vocab_size < config.width {
        return Err(Error::InvalidInput(format!(
            "width {} exceeds vocabulary size {}",
            config.width, mc.vocab_size
        )));
    }
    if config.target_len + 1 > mc.max_seq_len {
        return Err(Error::InvalidInput(format!(
            "target_len {} plus the BOS prefix exceeds max_seq_len {}",
            config.target_len, mc.max_seq_len
        )));
    }

    let n_searches = config.n_sequences.div_ceil(config.width);
    let mut sequences: Vec<Vec<usize>> = Vec::with_capacity(n_searches * config.width);
    let mut passes_per_search = Vec::with_capacity(n_searches);

    for search in 0..n_searches {
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        rng.set_stream(search as u64);
        let mut passes = 0u64;

        // Shared seeding pass on the BOS context.
        let (lp_bos, _) = model_forward(model, &[BOS_TOKEN])?;
        passes += 1;
        let first_lp = &lp_bos[0];
        let probs: Vec<f64> = first_lp.iter().map(|l| l.exp()).collect();
        let seeds = sample_distinct(&mut rng, &probs, config.width);
        let mut branches: Vec<Branch> = seeds
            .into_iter()
            .map(|v| Branch::seeded(v, first_lp[v], mc.n_layers, mc.n_routed))
            .collect();

        while branches[0].tokens.len() < config.target_len {
            let mut candidates: Vec<Candidate> =
                Vec::with_capacity(branches.len() * mc.vocab_size);
            for (b, branch) in branches.iter_mut().enumerate() {
                let mut ctx = Vec::with_capacity(branch.tokens.len() + 1);
                ctx.push(BOS_TOKEN);
                ctx.extend_from_slice(&branch.tokens);
                let (lps, trace) = model_forward(model, &ctx)?;
                passes += 1;

                // Deferred update: the routing of the most recently committed
                // token is known only now that this pass consumed it.
                branch.absorb_routing(&trace, branch.tokens.len());

                let next_lp = &lps[ctx.len() - 1];
                for (v, &logp) in next_lp.iter().enumerate() {
                    candidates.push(Candidate {
                        parent: b,
                        token: v,
                        logp,
                        score: score_candidate(branch, logp, config.tau)?,
                    });
                }
            }
            let (survivors, _) = prune_topw(&branches, &candidates, config.width);
            branches = survivors;
        }

        passes_per_search.push(passes);
        for branch in branches {
            sequences.push(branch.tokens);
        }
    }

    sequences.truncate(config.n_sequences);

    // Summary over fresh forward passes of the emitted sequences (not part
    // of the per-search budget).
    let mut traces = Vec::with_capacity(sequences.len());
    let mut ppl_sum = 0.0f64;
    for seq in &sequences {
        let (lps, trace) = model_forward(model, seq)?;
        ppl_sum += ppl_from_logprobs(&lps, seq)?;
        traces.push(trace);
    }
    let sigma = expert_usage(&traces)?.sigma;
    let summary = SetSummary { sigma, mean_ppl: ppl_sum / sequences.len() as f64 };

    Ok(EbssOutput {
        set: CalibrationSet {
            sequences,
            provenance: Provenance::Ebss {
                width: config.width,
                tau: config.tau,
                seed: config.seed,
            },
            summary: Some(summary),
        },
        passes_per_search,
    })
}

/// Writes a calibration set as UTF-8 text: a provenance header line, then
/// one sequence per line with token ids as space-separated decimals.
pub fn save_calibration(set: &CalibrationSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    match &set.provenance {
        Provenance::Ebss { width, tau, seed } => {
            writeln!(out, "#ebss v1 w={width} tau={tau} seed={seed}")
                .expect("string write cannot fail");
        }
        Provenance::External => {
            out.push_str("#external v1\n");
        }
    }
    for seq in &set.sequences {
        let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a calibration file, reporting malformed token ids with their line
/// number (1-based, header included).
pub fn load_calibration(path: &Path) -> Result<CalibrationSet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("calibration file is empty".into()))?;
    let provenance = parse_header(header)?;

    let mut sequences = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        if line.trim().is_empty() {
            return Err(Error::Format(format!("line {line_no}: empty sequence")));
        }
        let mut seq = Vec::new();
        for tok in line.split_whitespace() {
            let id: usize = tok.parse().map_err(|_| {
                Error::Format(format!("line {line_no}: malformed token id {tok:?}"))
            })?;
            seq.push(id);
        }
        sequences.push(seq);
    }
    if sequences.is_empty() {
        return Err(Error::Format("calibration file has no sequences".into()));
    }
    Ok(CalibrationSet { sequences, provenance, summary: None })
}

fn parse_header(header: &str) -> Result<Provenance> {
    if header == "#external v1" {
        return Ok(Provenance::External);
    }
    if let Some(rest) = header.strip_prefix("#ebss v1 ") {
        let mut width = None;
        let mut tau = None;
        let mut seed = None;
        for part in rest.split_whitespace() {
            if let Some(v) = part.strip_prefix("w=") {
                width = v.parse::<usize>().ok();
            } else if let Some(v) = part.strip_prefix("tau=") {
                tau = v.parse::<f64>().ok();
            } else if let Some(v) = part.strip_prefix("seed=") {
                seed = v.parse::<u64>().ok();
            }
        }
        match (width, tau, seed) {
            (Some(width), Some(tau), Some(seed)) => {
                return Ok(Provenance::Ebss { width, tau, seed })
            }
            _ => return Err(Error::Format("malformed #ebss header".into())),
        }
    }
    Err(Error::Format(format!("unrecognized calibration header {header:?}")))
}
