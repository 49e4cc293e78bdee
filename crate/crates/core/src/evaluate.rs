//! The six edit metrics: reliability, generalization, locality, portability,
//! fluency, and efficiency, plus aggregation.
//!
//! Every metric runs through a [`Responder`] so in-context and memory methods
//! are measured on their real query path, and nothing here can mutate a
//! model.

use serde::{Deserialize, Serialize};

use crate::editors::EditOutcome;
use crate::error::{Error, Result};
use crate::factworld::{EditRequest, TokenId};
use crate::microlm::Responder;

pub const DEFAULT_GEN_LEN: usize = 50;
/// Fluency weights: 1/3 bigram entropy, 2/3 trigram entropy, log base 2.
const BIGRAM_WEIGHT: f64 = 1.0 / 3.0;
const TRIGRAM_WEIGHT: f64 = 2.0 / 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub reliability: f64,
    pub generalization: f64,
    pub locality: f64,
    pub portability: f64,
    /// Weighted bigram/trigram entropy of a free-running generation, bits.
    pub fluency: f64,
    pub time_s: f64,
    pub extra_bytes: u64,
}

impl MetricReport {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).unwrap()
    }

    pub fn from_line(line: &str) -> Result<MetricReport> {
        serde_json::from_str(line).map_err(|e| Error::Parse(format!("metric record: {e}")))
    }

    pub fn zeroed() -> MetricReport {
        MetricReport {
            reliability: 0.0,
            generalization: 0.0,
            locality: 0.0,
            portability: 0.0,
            fluency: 0.0,
            time_s: 0.0,
            extra_bytes: 0,
        }
    }
}

/// 1 if the edited query path answers the edit prompt with the target.
pub fn reliability(post: &dyn Responder, request: &EditRequest) -> Result<f64> {
    Ok(if post.answer(&request.edit_prompt)? == request.target {
        1.0
    } else {
        0.0
    })
}

/// Mean accuracy on the rephrase set.
pub fn generalization(post: &dyn Responder, request: &EditRequest) -> Result<f64> {
    if request.rephrases.is_empty() {
        return Err(Error::Contract("empty rephrase set".into()));
    }
    let mut hits = 0usize;
    for r in &request.rephrases {
        if post.answer(r)? == request.target {
            hits += 1;
        }
    }
    Ok(hits as f64 / request.rephrases.len() as f64)
}

/// Mean agreement with the *base model's* answers on out-of-scope probes
/// (not gold accuracy).
pub fn locality(
    pre: &dyn Responder,
    post: &dyn Responder,
    request: &EditRequest,
) -> Result<f64> {
    if request.locality_probes.is_empty() {
        return Err(Error::Contract("empty locality probe set".into()));
    }
    let mut agree = 0usize;
    for (probe, _) in &request.locality_probes {
        if post.answer(probe)? == pre.answer(probe)? {
            agree += 1;
        }
    }
    Ok(agree as f64 / request.locality_probes.len() as f64)
}

/// Mean accuracy on probes whose answers follow from the new fact by one
/// relation hop.
pub fn portability(post: &dyn Responder, request: &EditRequest) -> Result<f64> {
    if request.portability_probes.is_empty() {
        return Err(Error::Contract("empty portability probe set".into()));
    }
    let mut hits = 0usize;
    for (probe, answer) in &request.portability_probes {
        if post.answer(probe)? == *answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / request.portability_probes.len() as f64)
}

/// Entropy of cyclic n-grams: every token starts exactly one n-gram, with
/// wraparound. H_n = −Σ p log₂ p over the empirical n-gram distribution.
fn cyclic_ngram_entropy(tokens: &[TokenId], n: usize) -> f64 {
    if tokens.len() < n {
        return 0.0;
    }
    let mut counts: std::collections::HashMap<Vec<TokenId>, usize> =
        std::collections::HashMap::new();
    let len = tokens.len();
    for i in 0..len {
        let gram: Vec<TokenId> = (0..n).map(|j| tokens[(i + j) % len]).collect();
        *counts.entry(gram).or_insert(0) += 1;
    }
    let total = len as f64;
    -counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Weighted bigram/trigram entropy of a token string, in bits.
pub fn ngram_fluency(tokens: &[TokenId]) -> f64 {
    BIGRAM_WEIGHT * cyclic_ngram_entropy(tokens, 2) + TRIGRAM_WEIGHT * cyclic_ngram_entropy(tokens, 3)
}

/// Generates `gen_len` tokens greedily from the edit prompt (free-running,
/// end token ignored) and scores their n-gram diversity. Returns the score
/// and a degenerate flag set when fewer than 3 tokens could be generated.
pub fn fluency(
    post: &dyn Responder,
    request: &EditRequest,
    gen_len: usize,
) -> Result<(f64, bool)> {
    if gen_len < 3 {
        return Err(Error::Contract(format!("gen_len {gen_len} below 3")));
    }
    let generation = post.generate_free(&request.edit_prompt, gen_len)?;
    if generation.len() < 3 {
        return Ok((0.0, true));
    }
    Ok((ngram_fluency(&generation), false))
}

/// Wall-clock seconds and retained auxiliary bytes for one edit.
pub fn efficiency(outcome: &EditOutcome) -> (f64, u64) {
    (outcome.elapsed_seconds, outcome.extra_state_bytes)
}

/// Assembles all six metrics for one edit.
pub fn evaluate_edit(
    pre: &dyn Responder,
    post: &dyn Responder,
    request: &EditRequest,
    outcome: &EditOutcome,
    gen_len: usize,
) -> Result<MetricReport> {
    let (time_s, extra_bytes) = efficiency(outcome);
    let (fluency_bits, _degenerate) = fluency(post, request, gen_len)?;
    Ok(MetricReport {
        reliability: reliability(post, request)?,
        generalization: generalization(post, request)?,
        locality: locality(pre, post, request)?,
        portability: portability(post, request)?,
        fluency: fluency_bits,
        time_s,
        extra_bytes,
    })
}

/// Arithmetic mean of fractions and fluency, sum of seconds, max of bytes.
pub fn aggregate(reports: &[MetricReport]) -> MetricReport {
    if reports.is_empty() {
        return MetricReport::zeroed();
    }
    let n = reports.len() as f64;
    MetricReport {
        reliability: reports.iter().map(|r| r.reliability).sum::<f64>() / n,
        generalization: reports.iter().map(|r| r.generalization).sum::<f64>() / n,
        locality: reports.iter().map(|r| r.locality).sum::<f64>() / n,
        portability: reports.iter().map(|r| r.portability).sum::<f64>() / n,
        fluency: reports.iter().map(|r| r.fluency).sum::<f64>() / n,
        time_s: reports.iter().map(|r| r.time_s).sum::<f64>(),
        extra_bytes: reports.iter().map(|r| r.extra_bytes).max().unwrap_or(0),
    }
}
