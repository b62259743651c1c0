//! Decoding: top-k sampling (the default), length-normalized beam search,
//! and diversity metrics over response pools.
//!
//! Token id conventions follow the vocabulary layout: `<BOS>` is id 0 and
//! `<EOS>` id 1 (see [`crate::tokenizer::Special`]). Returned sequences are
//! surface content only — BOS and EOS never appear in them.

use rand::Rng;
use thiserror::Error;

use crate::model::{self, Mode, ModelError, ModelParameters, TransformerConfig};
use crate::rng::Stream;
use crate::tensor::Real;
use crate::tokenizer::Special;

/// Default top-k cutoff.
pub const DEFAULT_TOP_K: usize = 30;

const BOS: u32 = Special::Bos as u32;
const EOS: u32 = Special::Eos as u32;

#[derive(Debug, Error)]
pub enum DecodingError {
    #[error("invalid decoder settings: {0}")]
    InvalidSettings(String),
    #[error("non-finite logit for token {0}")]
    NonFiniteLogit(usize),
    #[error("empty response pool")]
    EmptyPool,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Knobs for sampling and beam search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DecoderSettings {
    /// Sampling is restricted to the k most probable next tokens.
    pub k: usize,
    /// Maximum number of content tokens to emit.
    pub max_len: usize,
    pub beam_width: usize,
    pub seed: u64,
}

impl DecoderSettings {
    pub fn new(seed: u64) -> Self {
        Self {
            k: DEFAULT_TOP_K,
            max_len: 30,
            beam_width: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DecodingError> {
        for (name, value) in [
            ("k", self.k),
            ("max_len", self.max_len),
            ("beam_width", self.beam_width),
        ] {
            if value == 0 {
                return Err(DecodingError::InvalidSettings(format!(
                    "{name} must be at least 1"
                )));
            }
        }
        Ok(())
    }
}

/// Sample a token id from the softmax restricted to the `k` highest logits,
/// renormalized. Ties at the cutoff keep the lower id.
pub fn top_k_sample_token<F: Real>(
    logits: &[F],
    k: usize,
    rng: &mut Stream,
) -> Result<u32, DecodingError> {
    if k == 0 || k > logits.len() {
        return Err(DecodingError::InvalidSettings(format!(
            "k must be in 1..={}, got {k}",
            logits.len()
        )));
    }
    if let Some(bad) = logits.iter().position(|&l| !l.is_finite()) {
        return Err(DecodingError::NonFiniteLogit(bad));
    }

    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .expect("finite logits compare")
            .then(a.cmp(&b))
    });
    ids.truncate(k);

    // Renormalized softmax over the kept set, accumulated in f64 so the
    // empirical distribution matches the exact one as closely as possible.
    let top = logits[ids[0]].to_f64();
    let weights: Vec<f64> = ids
        .iter()
        .map(|&id| (logits[id].to_f64() - top).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (&id, &w) in ids.iter().zip(&weights) {
        draw -= w;
        if draw < 0.0 {
            return Ok(id as u32);
        }
    }
    Ok(*ids.last().expect("k >= 1") as u32)
}

/// Autoregressive top-k sampling: start from BOS, stop at EOS or after
/// `max_len` content tokens. The returned sequence is surface content only.
pub fn generate<F: Real>(
    params: &ModelParameters<F>,
    config: &TransformerConfig,
    context_ids: &[u32],
    settings: &DecoderSettings,
    rng: &mut Stream,
) -> Result<Vec<u32>, DecodingError> {
    settings.validate()?;
    let mut tokens = vec![BOS];
    for _ in 0..settings.max_len {
        let logits = model::forward(
            params,
            config,
            context_ids,
            context_ids.len(),
            &tokens,
            Mode::Eval,
        )?;
        let next = top_k_sample_token(logits.row(logits.rows() - 1), settings.k, rng)?;
        if next == EOS {
            break;
        }
        tokens.push(next);
    }
    tokens.remove(0);
    Ok(tokens)
}

/// Log-softmax of one logit row, in f64.
pub(crate) fn log_probs_f64<F: Real>(row: &[F]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|&l| l.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let log_z = row
        .iter()
        .map(|&l| (l.to_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|&l| l.to_f64() - log_z).collect()
}

#[derive(Clone)]
struct Beam {
    content: Vec<u32>,
    logprob_sum: f64,
    predicted: usize,
    finished: bool,
}

impl Beam {
    fn score(&self) -> f64 {
        self.logprob_sum / self.predicted as f64
    }
}

/// Length-normalized beam search: the score of a hypothesis is its mean
/// per-token log-probability, counting a terminating EOS as a predicted
/// token. Hypotheses finish at EOS or at `max_len` content tokens.
/// `beam_width` 1 is exactly greedy decoding. Returns the best surface
/// sequence and its score.
pub fn beam_search<F: Real>(
    params: &ModelParameters<F>,
    config: &TransformerConfig,
    context_ids: &[u32],
    beam_width: usize,
    max_len: usize,
) -> Result<(Vec<u32>, f64), DecodingError> {
    if beam_width == 0 || max_len == 0 {
        return Err(DecodingError::InvalidSettings(
            "beam_width and max_len must be at least 1".into(),
        ));
    }
    let mut beams = vec![Beam {
        content: Vec::new(),
        logprob_sum: 0.0,
        predicted: 0,
        finished: false,
    }];
    while beams.iter().any(|b| !b.finished) {
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &beams {
            if beam.finished {
                candidates.push(beam.clone());
                continue;
            }
            let mut tokens = Vec::with_capacity(beam.content.len() + 1);
            tokens.push(BOS);
            tokens.extend_from_slice(&beam.content);
            let logits = model::forward(
                params,
                config,
                context_ids,
                context_ids.len(),
                &tokens,
                Mode::Eval,
            )?;
            let log_probs = log_probs_f64(logits.row(logits.rows() - 1));
            for (token, &lp) in log_probs.iter().enumerate() {
                let token = token as u32;
                let mut next = beam.clone();
                next.logprob_sum += lp;
                next.predicted += 1;
                if token == EOS {
                    next.finished = true;
                } else {
                    next.content.push(token);
                    next.finished = next.content.len() == max_len;
                }
                candidates.push(next);
            }
        }
        // Stable sort: equal scores keep (beam, token-id) order, which makes
        // width-1 search tie-break exactly like greedy sampling.
        candidates.sort_by(|a, b| b.score().partial_cmp(&a.score()).expect("finite scores"));
        candidates.truncate(beam_width);
        beams = candidates;
    }
    let best = &beams[0];
    Ok((best.content.clone(), best.score()))
}

/// Pool-level diversity: base-2 Shannon entropies of the pooled bigram and
/// trigram distributions, plus the percentage frequencies of the most and
/// second-most frequent whole responses.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiversityReport {
    pub bigram_entropy: f64,
    pub trigram_entropy: f64,
    pub top1_percent: f64,
    pub top2_percent: f64,
}

impl DiversityReport {
    /// The two-percentage table form, e.g. `"1.7% 1.3%"`.
    pub fn frequency_cell(&self) -> String {
        format!("{:.1}% {:.1}%", self.top1_percent, self.top2_percent)
    }
}

fn ngram_entropy(responses: &[Vec<u32>], n: usize) -> f64 {
    let mut counts: std::collections::HashMap<&[u32], u64> = std::collections::HashMap::new();
    let mut total = 0u64;
    for response in responses {
        for gram in response.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

/// Diversity metrics over a pool of generated responses.
pub fn diversity_metrics(responses: &[Vec<u32>]) -> Result<DiversityReport, DecodingError> {
    if responses.is_empty() {
        return Err(DecodingError::EmptyPool);
    }
    let mut counts: std::collections::HashMap<&[u32], u64> = std::collections::HashMap::new();
    for response in responses {
        *counts.entry(response.as_slice()).or_insert(0) += 1;
    }
    let mut ranked: Vec<u64> = counts.into_values().collect();
    ranked.sort_unstable_by(|a, b| b.cmp(a));
    let total = responses.len() as f64;
    Ok(DiversityReport {
        bigram_entropy: ngram_entropy(responses, 2),
        trigram_entropy: ngram_entropy(responses, 3),
        top1_percent: 100.0 * ranked[0] as f64 / total,
        top2_percent: 100.0 * ranked.get(1).copied().unwrap_or(0) as f64 / total,
    })
}
