//! Corpus ingestion and training-pair construction.
//!
//! Two source formats feed the lab: document corpora (one sentence per
//! line, blank line between documents) drive next-sentence and span-mask
//! pretraining, and dialogue corpora (JSONL, one `{"utterances": [...]}`
//! object per line) drive finetuning. Every example becomes a
//! [`SequencePair`] — encoded context in, `<BOS> … <EOS>`-framed target
//! out — so the trainer never cares where a pair came from beyond its
//! [`Origin`] tag.
//!
//! Epoch composition lives here too: [`compose_epoch`] mixes a decaying
//! random subset of pretraining pairs into each finetuning epoch according
//! to a [`MixSchedule`].

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Stream;
use crate::tokenizer::{Codec, Special};

/// Context windows keep at most this many trailing tokens unless the
/// caller overrides it.
pub const DEFAULT_MAX_CONTEXT_TOKENS: usize = 128;

/// Default fraction of a sentence covered by the mask span.
pub const DEFAULT_MASK_FRACTION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: dialogue has {count} utterance(s), need at least 2")]
    ShortDialogue { line: usize, count: usize },
    #[error("invalid mix schedule: {0}")]
    InvalidSchedule(String),
    #[error("no pretraining data")]
    NoPretrainData,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Which distribution a pair was drawn from; preserved through epoch
/// mixing so diagnostics can count each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Pretrain,
    Target,
}

/// A corpus of documents, each an ordered list of sentences.
#[derive(Debug, Clone)]
pub struct DocumentCorpus {
    pub documents: Vec<Vec<String>>,
    pub origin: Origin,
}

/// A corpus of dialogues, each an ordered list of utterances.
#[derive(Debug, Clone)]
pub struct DialogueCorpus {
    pub dialogues: Vec<Vec<String>>,
}

/// One encoded training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequencePair {
    /// Encoder input, already truncated to the trailing context window.
    pub context: Vec<u32>,
    /// Decoder reference framed as `[BOS, tokens…, EOS]`.
    pub target: Vec<u32>,
    pub origin: Origin,
}

/// Loads a document corpus: one sentence per line, documents separated by
/// blank lines, trailing whitespace stripped.
pub fn load_document_corpus(path: &Path, origin: Origin) -> Result<DocumentCorpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut documents: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for line in text.lines() {
        let line = line.trim_end();
        if line.is_empty() {
            if !current.is_empty() {
                documents.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.to_owned());
        }
    }
    if !current.is_empty() {
        documents.push(current);
    }
    if documents.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(DocumentCorpus { documents, origin })
}

#[derive(Deserialize)]
struct DialogueLine {
    utterances: Vec<String>,
}

/// Loads a dialogue corpus: JSONL, one `{"utterances": [...]}` per line.
/// Lines that fail to parse or hold fewer than two utterances are rejected
/// by line number; blank lines are skipped.
pub fn load_dialogue_corpus(path: &Path) -> Result<DialogueCorpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut dialogues = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DialogueLine =
            serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
        if parsed.utterances.len() < 2 {
            return Err(CorpusError::ShortDialogue {
                line: i + 1,
                count: parsed.utterances.len(),
            });
        }
        dialogues.push(parsed.utterances);
    }
    if dialogues.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(DialogueCorpus { dialogues })
}

/// Keeps the trailing `max_len` tokens of `ids`.
fn truncate_to_suffix(mut ids: Vec<u32>, max_len: usize) -> Vec<u32> {
    if ids.len() > max_len {
        ids.drain(..ids.len() - max_len);
    }
    ids
}

/// Frames already-encoded target tokens as `[BOS, tokens…, EOS]`.
fn frame_target(tokens: &[u32], codec: &Codec<'_>) -> Vec<u32> {
    let mut target = Vec::with_capacity(tokens.len() + 2);
    target.push(codec.special(Special::Bos));
    target.extend_from_slice(tokens);
    target.push(codec.special(Special::Eos));
    target
}

/// Builds one next-sentence pair per sentence after the first: the
/// context is all earlier sentences joined by `<eou>` (trailing
/// `max_context_tokens` kept), the target is the sentence itself.
pub fn make_ns_pairs(
    sentences: &[String],
    codec: &Codec<'_>,
    max_context_tokens: usize,
    origin: Origin,
) -> Vec<SequencePair> {
    let mut pairs = Vec::new();
    for t in 1..sentences.len() {
        let context_text = sentences[..t].join(&format!(" {} ", Special::Eou.literal()));
        let context = truncate_to_suffix(codec.encode(&context_text), max_context_tokens);
        let target = frame_target(&codec.encode(&sentences[t]), codec);
        pairs.push(SequencePair {
            context,
            target,
            origin,
        });
    }
    pairs
}

/// Builds one dialogue pair per utterance after the first, mirroring
/// [`make_ns_pairs`] over utterances; pairs are tagged [`Origin::Target`].
pub fn make_dialogue_pairs(
    utterances: &[String],
    codec: &Codec<'_>,
    max_context_tokens: usize,
) -> Vec<SequencePair> {
    let mut pairs = make_ns_pairs(utterances, codec, max_context_tokens, Origin::Target);
    for p in &mut pairs {
        p.origin = Origin::Target;
    }
    pairs
}

/// Masks a contiguous span of `ceil(fraction · n)` tokens at a uniformly
/// random start: the masked sentence becomes the context and the hidden
/// tokens become the target. Sentences shorter than two tokens produce no
/// pair.
pub fn make_mass_pair(
    sentence: &[u32],
    fraction: f64,
    codec: &Codec<'_>,
    rng: &mut Stream,
) -> Option<SequencePair> {
    let n = sentence.len();
    if n < 2 {
        return None;
    }
    let span = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let start = rng.random_range(0..=n - span);
    let mask = codec.special(Special::Mask);
    let mut context = sentence.to_vec();
    for slot in &mut context[start..start + span] {
        *slot = mask;
    }
    let target = frame_target(&sentence[start..start + span], codec);
    Some(SequencePair {
        context,
        target,
        origin: Origin::Pretrain,
    })
}

/// How much pretraining data each finetuning epoch mixes in: epoch `e`
/// draws `round(base_target_size · mix_ratio · mix_decay^(e−1))` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSchedule {
    pub mix_ratio: f64,
    pub mix_decay: f64,
    pub base_target_size: usize,
}

impl MixSchedule {
    pub fn new(
        mix_ratio: f64,
        mix_decay: f64,
        base_target_size: usize,
    ) -> Result<Self, CorpusError> {
        if !mix_ratio.is_finite() || mix_ratio < 0.0 {
            return Err(CorpusError::InvalidSchedule(format!(
                "mix_ratio must be nonnegative, got {mix_ratio}"
            )));
        }
        if !(mix_decay > 0.0 && mix_decay <= 1.0) {
            return Err(CorpusError::InvalidSchedule(format!(
                "mix_decay must be in (0, 1], got {mix_decay}"
            )));
        }
        Ok(Self {
            mix_ratio,
            mix_decay,
            base_target_size,
        })
    }

    /// Pretraining pairs to mix into epoch `epoch` (1-based), rounded half
    /// away from zero.
    pub fn mix_count(&self, epoch: usize) -> usize {
        assert!(epoch >= 1, "epochs are 1-based");
        let raw = self.base_target_size as f64
            * self.mix_ratio
            * self.mix_decay.powi(epoch as i32 - 1);
        raw.round() as usize
    }
}

/// Composes one training epoch: all target pairs plus `mix_count(epoch)`
/// pretraining pairs sampled uniformly without replacement (falling back
/// to with-replacement when the pool is smaller), shuffled together.
pub fn compose_epoch(
    target_pairs: &[SequencePair],
    pretrain_pairs: &[SequencePair],
    epoch: usize,
    schedule: &MixSchedule,
    rng: &mut Stream,
) -> Result<Vec<SequencePair>, CorpusError> {
    let count = schedule.mix_count(epoch);
    let mut epoch_pairs: Vec<SequencePair> = target_pairs.to_vec();
    if count > 0 {
        if pretrain_pairs.is_empty() {
            return Err(CorpusError::NoPretrainData);
        }
        if count <= pretrain_pairs.len() {
            let picks = rand::seq::index::sample(rng, pretrain_pairs.len(), count);
            epoch_pairs.extend(picks.iter().map(|i| pretrain_pairs[i].clone()));
        } else {
            for _ in 0..count {
                let i = rng.random_range(0..pretrain_pairs.len());
                epoch_pairs.push(pretrain_pairs[i].clone());
            }
        }
    }
    epoch_pairs.shuffle(rng);
    Ok(epoch_pairs)
}

/// A fixed-size slice of an epoch, padded for batched evaluation. Rows of
/// `contexts`/`targets` share one width; `context_lens`/`target_lens`
/// give each row's real length, everything past it is `pad`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub contexts: Vec<Vec<u32>>,
    pub context_lens: Vec<usize>,
    pub targets: Vec<Vec<u32>>,
    pub target_lens: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    /// True at positions of row `i`'s target that hold real tokens.
    pub fn target_mask(&self, i: usize) -> Vec<bool> {
        (0..self.targets[i].len())
            .map(|t| t < self.target_lens[i])
            .collect()
    }
}

/// Chunks pairs into batches of `batch_size` (last may be short), padding
/// contexts and targets to each batch's maximum lengths with `pad`.
pub fn batchify(pairs: &[SequencePair], batch_size: usize, pad: u32) -> Vec<Batch> {
    assert!(batch_size >= 1);
    pairs
        .chunks(batch_size)
        .map(|chunk| {
            let ctx_width = chunk.iter().map(|p| p.context.len()).max().unwrap_or(0);
            let tgt_width = chunk.iter().map(|p| p.target.len()).max().unwrap_or(0);
            let mut batch = Batch {
                contexts: Vec::with_capacity(chunk.len()),
                context_lens: Vec::with_capacity(chunk.len()),
                targets: Vec::with_capacity(chunk.len()),
                target_lens: Vec::with_capacity(chunk.len()),
            };
            for pair in chunk {
                let mut ctx = pair.context.clone();
                ctx.resize(ctx_width, pad);
                let mut tgt = pair.target.clone();
                tgt.resize(tgt_width, pad);
                batch.contexts.push(ctx);
                batch.context_lens.push(pair.context.len());
                batch.targets.push(tgt);
                batch.target_lens.push(pair.target.len());
            }
            batch
        })
        .collect()
}
