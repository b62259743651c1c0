//! Behavior probes run against a trained checkpoint: perplexity tables,
//! context-sensitivity under input corruption, knowledge-trigger BLEU, and
//! 2D projection of checkpoint collections in function or parameter space.
//!
//! All probes are read-only over the parameters. Perturbations draw from
//! streams keyed on (run seed, pair index), so two checkpoints probed with
//! the same seed see byte-identical corruptions.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::hash::Hash;
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::corpus::SequencePair;
use crate::decoding::{self, DecoderSettings, DecodingError, DiversityReport};
use crate::model::{self, ModelError, ModelParameters, TransformerConfig};
use crate::rng::{self, tag, Stream};
use crate::tensor::Real;
use crate::tokenizer::Codec;

/// Fraction of context tokens removed by the word-drop corruption.
pub const DEFAULT_DROP_RATE: f64 = 0.3;
/// Responses generated per instantiated trigger.
pub const DEFAULT_SAMPLES_PER_TRIGGER: usize = 10;
/// Reference-token probabilities recorded per evaluation set.
pub const DEFAULT_TOKEN_BUDGET: usize = 1000;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("drop rate must satisfy 0 <= rate < 1, got {0}")]
    InvalidRate(f64),
    #[error("knowledge term and description must be non-empty")]
    EmptyTerm,
    #[error("template {0:?} must contain exactly one `X` placeholder")]
    BadTemplate(String),
    #[error("no knowledge terms supplied")]
    NoTerms,
    #[error("no {0} trigger templates supplied")]
    NoTemplates(TriggerStyle),
    #[error("samples_per_trigger must be at least 1")]
    NoSamples,
    #[error("2D projection needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("projection vectors must share one length, found {0} and {1}")]
    VectorLengthMismatch(usize, usize),
    #[error("non-finite value in probe report field {0}")]
    NonFiniteReport(String),
    #[error("probe report is missing its checkpoint id")]
    IncompleteProvenance,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decoding(#[from] DecodingError),
}

fn io_err(path: &Path, source: std::io::Error) -> ProbeError {
    ProbeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// exp(token-level micro-averaged NLL) over a pair set, in eval mode.
pub fn perplexity<F: Real>(
    params: &ModelParameters<F>,
    config: &TransformerConfig,
    pairs: &[SequencePair],
) -> Result<f64, ProbeError> {
    Ok(model::mean_token_nll(params, config, pairs)?.exp())
}

/// Removes exactly `round(rate * n)` positions, chosen uniformly without
/// replacement; survivors keep their relative order. Separator tokens are
/// as eligible as any other.
pub fn perturb_word_drop(
    context_ids: &[u32],
    rate: f64,
    rng: &mut Stream,
) -> Result<Vec<u32>, ProbeError> {
    if !rate.is_finite() || !(0.0..1.0).contains(&rate) {
        return Err(ProbeError::InvalidRate(rate));
    }
    let n = context_ids.len();
    let drop = (rate * n as f64).round() as usize;
    if drop == 0 {
        return Ok(context_ids.to_vec());
    }
    let mut dropped = vec![false; n];
    for i in rand::seq::index::sample(rng, n, drop) {
        dropped[i] = true;
    }
    Ok(context_ids
        .iter()
        .zip(&dropped)
        .filter_map(|(&t, &d)| (!d).then_some(t))
        .collect())
}

/// Uniformly random permutation of the context tokens.
pub fn perturb_word_shuffle(context_ids: &[u32], rng: &mut Stream) -> Vec<u32> {
    let mut out = context_ids.to_vec();
    out.shuffle(rng);
    out
}

/// Clean and corrupted perplexities plus the relative increases, each as a
/// fraction (0.41 prints as "+41%").
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SensitivityReport {
    pub clean_ppl: f64,
    pub shuffle_ppl: f64,
    pub drop_ppl: f64,
    pub shuffle_increase: f64,
    pub drop_increase: f64,
}

impl SensitivityReport {
    /// Table cell form, shuffle then drop: `"+41%/+64%"`.
    pub fn table_cell(&self) -> String {
        format!(
            "{:+.0}%/{:+.0}%",
            100.0 * self.shuffle_increase,
            100.0 * self.drop_increase
        )
    }
}

/// Measures how much perplexity rises when context inputs are shuffled or
/// thinned. One fixed corruption per pair per condition, keyed on
/// (run seed, pair index), so different checkpoints compare like for like.
pub fn context_sensitivity<F: Real>(
    params: &ModelParameters<F>,
    config: &TransformerConfig,
    pairs: &[SequencePair],
    drop_rate: f64,
    run_seed: u64,
) -> Result<SensitivityReport, ProbeError> {
    let clean_ppl = perplexity(params, config, pairs)?;
    let mut shuffled = Vec::with_capacity(pairs.len());
    let mut thinned = Vec::with_capacity(pairs.len());
    for (index, pair) in pairs.iter().enumerate() {
        let mut stream = rng::stream(run_seed, &[tag::PERTURB_SHUFFLE, index as u64]);
        shuffled.push(SequencePair {
            context: perturb_word_shuffle(&pair.context, &mut stream),
            ..pair.clone()
        });
        let mut stream = rng::stream(run_seed, &[tag::PERTURB_DROP, index as u64]);
        thinned.push(SequencePair {
            context: perturb_word_drop(&pair.context, drop_rate, &mut stream)?,
            ..pair.clone()
        });
    }
    let shuffle_ppl = perplexity(params, config, &shuffled)?;
    let drop_ppl = perplexity(params, config, &thinned)?;
    Ok(SensitivityReport {
        clean_ppl,
        shuffle_ppl,
        drop_ppl,
        shuffle_increase: (shuffle_ppl - clean_ppl) / clean_ppl,
        drop_increase: (drop_ppl - clean_ppl) / clean_ppl,
    })
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, u64> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Sentence-level BLEU: geometric mean of clipped n-gram precisions for
/// n = 1..=max_n with epsilon smoothing on zero counts, times the standard
/// brevity penalty. An empty candidate scores 0.
pub fn bleu_n<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], max_n: usize) -> f64 {
    const EPS: f64 = 1e-9;
    if candidate.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        if candidate.len() < n {
            // No n-grams to score; smoothing keeps the geometric mean finite.
            log_sum += EPS.ln();
            continue;
        }
        let total = (candidate.len() - n + 1) as f64;
        let reference_counts = ngram_counts(reference, n);
        let clipped: u64 = ngram_counts(candidate, n)
            .iter()
            .map(|(gram, &count)| count.min(reference_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let numerator = if clipped == 0 { EPS } else { clipped as f64 };
        log_sum += (numerator / total).ln();
    }
    let brevity = if candidate.len() < reference.len() {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    } else {
        1.0
    };
    brevity * (log_sum / max_n as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerStyle {
    News,
    Dialogue,
}

impl std::fmt::Display for TriggerStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TriggerStyle::News => "news",
            TriggerStyle::Dialogue => "dialogue",
        })
    }
}

/// A trending term with the reference description its responses are scored
/// against.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct KnowledgeTerm {
    pub term: String,
    pub reference_description: String,
}

impl KnowledgeTerm {
    pub fn new(
        term: impl Into<String>,
        reference_description: impl Into<String>,
    ) -> Result<Self, ProbeError> {
        let term = term.into();
        let reference_description = reference_description.into();
        if term.trim().is_empty() || reference_description.trim().is_empty() {
            return Err(ProbeError::EmptyTerm);
        }
        Ok(Self {
            term,
            reference_description,
        })
    }
}

/// A prompt pattern with a single `X` slot for the knowledge term.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TriggerTemplate {
    pub text: String,
    pub style: TriggerStyle,
}

impl TriggerTemplate {
    pub fn new(text: impl Into<String>, style: TriggerStyle) -> Result<Self, ProbeError> {
        let text = text.into();
        if text.matches('X').count() != 1 {
            return Err(ProbeError::BadTemplate(text));
        }
        Ok(Self { text, style })
    }

    pub fn instantiate(&self, term: &str) -> String {
        self.text.replacen('X', term, 1)
    }
}

/// The built-in trigger set: three news-style and three dialogue-style
/// prompt patterns.
pub fn default_templates() -> Vec<TriggerTemplate> {
    let news = [
        "now, some opinions about X .",
        "let me tell you about X .",
        "here's some news about X .",
    ];
    let dialogue = [
        "what you do think about X ?",
        "please tell me about X .",
        "do you have news about X ?",
    ];
    news.iter()
        .map(|t| (*t, TriggerStyle::News))
        .chain(dialogue.iter().map(|t| (*t, TriggerStyle::Dialogue)))
        .map(|(text, style)| TriggerTemplate::new(text, style).expect("built-in template"))
        .collect()
}

/// Loads knowledge terms from JSONL lines of
/// `{"term": ..., "description": ...}`. Blank lines are skipped.
pub fn load_terms(path: &Path) -> Result<Vec<KnowledgeTerm>, ProbeError> {
    #[derive(serde::Deserialize)]
    struct TermLine {
        term: String,
        description: String,
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut terms = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TermLine = serde_json::from_str(line).map_err(|e| ProbeError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        terms.push(
            KnowledgeTerm::new(parsed.term, parsed.description).map_err(|e| {
                ProbeError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                }
            })?,
        );
    }
    if terms.is_empty() {
        return Err(ProbeError::NoTerms);
    }
    Ok(terms)
}

/// Parses a template file: one template per line under `#news` or
/// `#dialogue` section headers.
pub fn parse_templates(text: &str) -> Result<Vec<TriggerTemplate>, ProbeError> {
    let mut templates = Vec::new();
    let mut style = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "#news" => style = Some(TriggerStyle::News),
            "#dialogue" => style = Some(TriggerStyle::Dialogue),
            _ => {
                let style = style.ok_or(ProbeError::Malformed {
                    line: i + 1,
                    message: "template before any #news/#dialogue header".into(),
                })?;
                templates.push(TriggerTemplate::new(line, style).map_err(|e| {
                    ProbeError::Malformed {
                        line: i + 1,
                        message: e.to_string(),
                    }
                })?);
            }
        }
    }
    Ok(templates)
}

pub fn load_templates(path: &Path) -> Result<Vec<TriggerTemplate>, ProbeError> {
    parse_templates(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
}

/// Produces responses to trigger prompts and encodes reference text into the
/// same token space. Implemented over a real checkpoint by
/// [`ModelResponder`]; tests may substitute oracles.
pub trait ResponseGenerator {
    fn respond(&mut self, prompt: &str) -> Result<Vec<u32>, ProbeError>;
    fn encode(&self, text: &str) -> Vec<u32>;
}

/// Top-k sampling over a checkpoint, with the prompt encoded as a
/// single-utterance context.
pub struct ModelResponder<'a, F: Real> {
    params: &'a ModelParameters<F>,
    config: &'a TransformerConfig,
    codec: Codec<'a>,
    settings: DecoderSettings,
    rng: Stream,
}

impl<'a, F: Real> ModelResponder<'a, F> {
    pub fn new(
        params: &'a ModelParameters<F>,
        config: &'a TransformerConfig,
        codec: Codec<'a>,
        settings: DecoderSettings,
    ) -> Self {
        let rng = rng::stream(settings.seed, &[tag::GENERATE]);
        Self {
            params,
            config,
            codec,
            settings,
            rng,
        }
    }
}

impl<F: Real> ResponseGenerator for ModelResponder<'_, F> {
    fn respond(&mut self, prompt: &str) -> Result<Vec<u32>, ProbeError> {
        let context = self.codec.encode(prompt);
        Ok(decoding::generate(
            self.params,
            self.config,
            &context,
            &self.settings,
            &mut self.rng,
        )?)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.codec.encode(text)
    }
}

/// Mean BLEU against reference descriptions, averaged over samples, then
/// triggers, then terms.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KnowledgeReport {
    pub style: TriggerStyle,
    pub bleu2: f64,
    pub bleu3: f64,
    pub term_count: usize,
    pub samples_per_trigger: usize,
}

/// Instantiates every template of the chosen style with every term, draws
/// `samples_per_trigger` responses each, and scores them with BLEU-2/BLEU-3
/// against the term's reference description.
pub fn knowledge_probe<G: ResponseGenerator>(
    generator: &mut G,
    terms: &[KnowledgeTerm],
    templates: &[TriggerTemplate],
    style: TriggerStyle,
    samples_per_trigger: usize,
) -> Result<KnowledgeReport, ProbeError> {
    if terms.is_empty() {
        return Err(ProbeError::NoTerms);
    }
    if samples_per_trigger == 0 {
        return Err(ProbeError::NoSamples);
    }
    let selected: Vec<&TriggerTemplate> = templates.iter().filter(|t| t.style == style).collect();
    if selected.is_empty() {
        return Err(ProbeError::NoTemplates(style));
    }
    let mut term_mean = (0.0, 0.0);
    for term in terms {
        let reference = generator.encode(&term.reference_description);
        let mut trigger_mean = (0.0, 0.0);
        for template in &selected {
            let prompt = template.instantiate(&term.term);
            let mut sample_mean = (0.0, 0.0);
            for _ in 0..samples_per_trigger {
                let response = generator.respond(&prompt)?;
                sample_mean.0 += bleu_n(&response, &reference, 2);
                sample_mean.1 += bleu_n(&response, &reference, 3);
            }
            trigger_mean.0 += sample_mean.0 / samples_per_trigger as f64;
            trigger_mean.1 += sample_mean.1 / samples_per_trigger as f64;
        }
        term_mean.0 += trigger_mean.0 / selected.len() as f64;
        term_mean.1 += trigger_mean.1 / selected.len() as f64;
    }
    Ok(KnowledgeReport {
        style,
        bleu2: term_mean.0 / terms.len() as f64,
        bleu3: term_mean.1 / terms.len() as f64,
        term_count: terms.len(),
        samples_per_trigger,
    })
}

/// Probabilities the model assigns to the first `token_budget` reference
/// tokens of each evaluation set, concatenated in set order. Sets smaller
/// than the budget contribute everything they have.
pub fn function_space_vector<F: Real>(
    params: &ModelParameters<F>,
    config: &TransformerConfig,
    eval_sets: &[&[SequencePair]],
    token_budget: usize,
) -> Result<Vec<f64>, ProbeError> {
    let mut out = Vec::new();
    for &set in eval_sets {
        let mut taken = 0;
        'pairs: for pair in set {
            let decoder_input = &pair.target[..pair.target.len() - 1];
            let logits = model::forward(
                params,
                config,
                &pair.context,
                pair.context.len(),
                decoder_input,
                model::Mode::Eval,
            )?;
            for (row, &label) in pair.target[1..].iter().enumerate() {
                if taken == token_budget {
                    break 'pairs;
                }
                let log_probs = decoding::log_probs_f64(logits.row(row));
                out.push(log_probs[label as usize].exp());
                taken += 1;
            }
        }
    }
    Ok(out)
}

/// Name-sorted concatenation of every flattened parameter tensor.
pub fn parameter_space_vector<F: Real>(params: &ModelParameters<F>) -> Vec<f64> {
    params
        .iter()
        .flat_map(|(_, tensor)| tensor.as_slice().iter().map(|&x| x.to_f64()))
        .collect()
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns), unordered.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum();
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                // Classic two-sided rotation zeroing a[p][q].
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                let (head, tail) = a.split_at_mut(q);
                for (apk, aqk) in head[p].iter_mut().zip(tail[0].iter_mut()) {
                    let (x, y) = (*apk, *aqk);
                    *apk = c * x - s * y;
                    *aqk = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[i][i]).collect();
    (eigenvalues, v)
}

/// Projects equal-length vectors onto their top-2 principal directions
/// after mean-centering. Signs are fixed by making the largest-magnitude
/// loading of each direction positive; output order matches input order.
pub fn project_2d(vectors: &[Vec<f64>]) -> Result<Vec<(f64, f64)>, ProbeError> {
    let n = vectors.len();
    if n < 2 {
        return Err(ProbeError::TooFewVectors(n));
    }
    let d = vectors[0].len();
    for v in vectors {
        if v.len() != d {
            return Err(ProbeError::VectorLengthMismatch(d, v.len()));
        }
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    // The Gram matrix X·Xᵀ is n×n (checkpoint count, not parameter count);
    // if G·v = λ·v then u = Xᵀ·v/√λ is a unit principal direction and the
    // projection scores are X·u = √λ·v.
    let gram: Vec<Vec<f64>> = centered
        .iter()
        .map(|a| centered.iter().map(|b| dot(a, b)).collect())
        .collect();
    let (eigenvalues, eigenvectors) = jacobi_eigen(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eigenvalues[j].partial_cmp(&eigenvalues[i]).expect("finite"));

    let mut points = vec![(0.0, 0.0); n];
    let floor = eigenvalues[order[0]].max(0.0) * 1e-12;
    for (axis, &which) in order.iter().take(2).enumerate() {
        let lambda = eigenvalues[which];
        if lambda <= floor || lambda <= 0.0 {
            continue; // degenerate direction: scores stay 0
        }
        let sqrt_lambda = lambda.sqrt();
        // Loadings u = Xᵀ·v/√λ determine the sign convention.
        let mut loading = vec![0.0; d];
        for (row, v_i) in centered.iter().zip(eigenvectors.iter().map(|r| r[which])) {
            for (l, x) in loading.iter_mut().zip(row) {
                *l += v_i * x / sqrt_lambda;
            }
        }
        let extreme = loading
            .iter()
            .copied()
            .max_by(|a, b| a.abs().partial_cmp(&b.abs()).expect("finite"))
            .unwrap_or(1.0);
        let sign = if extreme < 0.0 { -1.0 } else { 1.0 };
        for (point, row) in points.iter_mut().zip(&eigenvectors) {
            let score = sign * sqrt_lambda * row[which];
            if axis == 0 {
                point.0 = score;
            } else {
                point.1 = score;
            }
        }
    }
    // Equal inputs must land on equal outputs; eigensolver rotations are
    // allowed to order indices differently, so unify explicitly.
    for j in 1..n {
        if let Some(i) = (0..j).find(|&i| vectors[i] == vectors[j]) {
            points[j] = points[i];
        }
    }
    Ok(points)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One checkpoint's position in a 2D projection.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProjectedCheckpoint {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

/// Where a report came from: which checkpoint, probed how.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeProvenance {
    pub checkpoint: String,
    pub seed: u64,
    pub decoder: DecoderSettings,
}

/// The assembled probe artifact, serialized to JSON by the caller.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeReport {
    pub provenance: ProbeProvenance,
    /// Split name → perplexity.
    pub perplexity: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<KnowledgeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity: Option<DiversityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projection: Option<Vec<ProjectedCheckpoint>>,
}

impl ProbeReport {
    pub fn new(provenance: ProbeProvenance) -> Self {
        Self {
            provenance,
            perplexity: BTreeMap::new(),
            sensitivity: None,
            knowledge: None,
            diversity: None,
            projection: None,
        }
    }

    /// Checks that provenance is complete and every numeric field is finite.
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.provenance.checkpoint.trim().is_empty() {
            return Err(ProbeError::IncompleteProvenance);
        }
        let mut fields: Vec<(String, f64)> = self
            .perplexity
            .iter()
            .map(|(k, &v)| (format!("perplexity.{k}"), v))
            .collect();
        if let Some(s) = &self.sensitivity {
            fields.push(("sensitivity.clean_ppl".into(), s.clean_ppl));
            fields.push(("sensitivity.shuffle_ppl".into(), s.shuffle_ppl));
            fields.push(("sensitivity.drop_ppl".into(), s.drop_ppl));
            fields.push(("sensitivity.shuffle_increase".into(), s.shuffle_increase));
            fields.push(("sensitivity.drop_increase".into(), s.drop_increase));
        }
        if let Some(k) = &self.knowledge {
            fields.push(("knowledge.bleu2".into(), k.bleu2));
            fields.push(("knowledge.bleu3".into(), k.bleu3));
        }
        if let Some(d) = &self.diversity {
            fields.push(("diversity.bigram_entropy".into(), d.bigram_entropy));
            fields.push(("diversity.trigram_entropy".into(), d.trigram_entropy));
            fields.push(("diversity.top1_percent".into(), d.top1_percent));
            fields.push(("diversity.top2_percent".into(), d.top2_percent));
        }
        for point in self.projection.iter().flatten() {
            fields.push((format!("projection.{}.x", point.label), point.x));
            fields.push((format!("projection.{}.y", point.label), point.y));
        }
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(ProbeError::NonFiniteReport(name));
            }
        }
        Ok(())
    }
}
