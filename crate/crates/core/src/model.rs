//! Encoder-decoder transformer with exact gradients.
//!
//! The architecture is the standard post-LN transformer: shared embedding
//! table scaled by √d_model plus fixed sinusoidal positions, multi-head
//! attention (causal in the decoder, full cross-attention to the encoder),
//! ReLU feed-forward blocks, residual connections, and layer norm after
//! each sublayer. Dropout sits on attention weights, the feed-forward
//! hidden layer, and sublayer outputs.
//!
//! Every forward builds a per-example [`Graph`] tape; [`backward`] replays
//! it in reverse for gradients that match finite differences (see tests).
//! Dropout masks are drawn from a stream keyed by `(seed, step, example)`,
//! so a training step is reproducible bit-for-bit regardless of thread
//! count or strategy.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Batch;
use crate::graph::{Graph, NodeId};
use crate::rng::{self, tag, Stream};
use crate::tensor::{log_softmax_in_place, Matrix, Real};

/// Additive mask value; exp(-1e30 - max) underflows to exactly zero after
/// max subtraction, so masked attention weights are hard zeros.
const MASK_VALUE: f64 = -1e30;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty context")]
    EmptyContext,
    #[error("empty target")]
    EmptyTarget,
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("non-finite loss at batch index {example}")]
    NonFiniteLoss { example: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Architecture hyperparameters. Shapes of every trainable tensor are a
/// pure function of this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl TransformerConfig {
    /// Default desk-scale model: big enough to overfit a toy corpus,
    /// small enough that a full experiment runs in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 256,
            dropout_rate: 0.1,
            vocab_size,
            max_positions: 160,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_ff == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(ModelError::InvalidConfig("zero-sized dimension".into()));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.vocab_size == 0 {
            return Err(ModelError::InvalidConfig("empty vocabulary".into()));
        }
        if self.max_positions == 0 {
            return Err(ModelError::InvalidConfig("max_positions is zero".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Expected name → (rows, cols) for every trainable tensor.
pub fn parameter_shapes(config: &TransformerConfig) -> BTreeMap<String, (usize, usize)> {
    let d = config.d_model;
    let mut shapes = BTreeMap::new();
    shapes.insert("embed".to_owned(), (config.vocab_size, d));
    shapes.insert("out.w".to_owned(), (d, config.vocab_size));
    shapes.insert("out.b".to_owned(), (1, config.vocab_size));

    type Shapes = BTreeMap<String, (usize, usize)>;
    let attn = |shapes: &mut Shapes, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            shapes.insert(format!("{prefix}.{w}"), (d, d));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            shapes.insert(format!("{prefix}.{b}"), (1, d));
        }
    };
    let norm = |shapes: &mut Shapes, prefix: &str| {
        shapes.insert(format!("{prefix}.gain"), (1, d));
        shapes.insert(format!("{prefix}.bias"), (1, d));
    };
    let ffn = |shapes: &mut Shapes, prefix: &str| {
        shapes.insert(format!("{prefix}.w1"), (d, config.d_ff));
        shapes.insert(format!("{prefix}.b1"), (1, config.d_ff));
        shapes.insert(format!("{prefix}.w2"), (config.d_ff, d));
        shapes.insert(format!("{prefix}.b2"), (1, d));
    };

    for i in 0..config.num_layers {
        attn(&mut shapes, &format!("enc.{i}.attn"));
        norm(&mut shapes, &format!("enc.{i}.ln1"));
        ffn(&mut shapes, &format!("enc.{i}.ffn"));
        norm(&mut shapes, &format!("enc.{i}.ln2"));

        attn(&mut shapes, &format!("dec.{i}.self_attn"));
        norm(&mut shapes, &format!("dec.{i}.ln1"));
        attn(&mut shapes, &format!("dec.{i}.cross_attn"));
        norm(&mut shapes, &format!("dec.{i}.ln2"));
        ffn(&mut shapes, &format!("dec.{i}.ffn"));
        norm(&mut shapes, &format!("dec.{i}.ln3"));
    }
    shapes
}

/// All trainable tensors, keyed by name. Iteration order is the sorted
/// name order, which checkpointing and reductions rely on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<F: Real> {
    tensors: BTreeMap<String, Matrix<F>>,
}

impl<F: Real> ModelParameters<F> {
    pub fn from_tensors(tensors: BTreeMap<String, Matrix<F>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix<F>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total element count across all tensors.
    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Matrix::all_finite)
    }

    pub fn cast<G: Real>(&self) -> ModelParameters<G> {
        ModelParameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// ∂loss/∂θ with the same names and shapes as [`ModelParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<F: Real> {
    tensors: BTreeMap<String, Matrix<F>>,
}

impl<F: Real> GradientSet<F> {
    pub fn zeros_like(params: &ModelParameters<F>) -> Self {
        Self {
            tensors: params
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix<F>)> {
        self.tensors.iter_mut()
    }

    /// `self += other · scale`, matched by name.
    pub fn add_assign_scaled(&mut self, other: &GradientSet<F>, scale: F) {
        for (name, tensor) in &mut self.tensors {
            if let Some(o) = other.tensors.get(name) {
                tensor.add_assign_scaled(o, scale);
            }
        }
    }

    fn add_named(&mut self, name: &str, grad: &Matrix<F>) {
        if let Some(t) = self.tensors.get_mut(name) {
            t.add_assign_scaled(grad, F::one());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Matrix::all_finite)
    }
}

/// Draws every tensor from U(−b, b) with b = 1/√fan_in (fan_in = input
/// width: rows for weight matrices, columns for the embedding table).
/// Biases start at zero and layer-norm gains at one.
pub fn init_parameters<F: Real>(
    config: &TransformerConfig,
    seed: u64,
) -> Result<ModelParameters<F>, ModelError> {
    config.validate()?;
    let mut stream = rng::stream(seed, &[tag::PARAM_INIT]);
    let mut tensors = BTreeMap::new();
    for (name, (rows, cols)) in parameter_shapes(config) {
        let is_bias = [".bias", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo"]
            .iter()
            .any(|s| name.ends_with(s))
            || name == "out.b";
        let tensor = if name.ends_with(".gain") {
            Matrix::from_fn(rows, cols, |_, _| F::one())
        } else if is_bias {
            Matrix::zeros(rows, cols)
        } else {
            let fan_in = if name == "embed" { cols } else { rows };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut m = Matrix::zeros(rows, cols);
            for v in m.as_mut_slice() {
                let u: f64 = stream.random();
                *v = F::from_f64((2.0 * u - 1.0) * bound);
            }
            m
        };
        tensors.insert(name, tensor);
    }
    Ok(ModelParameters { tensors })
}

/// Whether a forward pass applies dropout, and which stream feeds it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// No dropout; a pure function of parameters and inputs.
    Eval,
    /// Dropout masks drawn from `stream(seed, [DROPOUT, step, example])`.
    Train { seed: u64, step: u64, example: u64 },
}

fn positional<F: Real>(len: usize, d: usize) -> Matrix<F> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Vec<f64>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let flat: Vec<f64> = {
        let mut map = cache.lock().unwrap();
        let rows = map.entry(d).or_default();
        let have = rows.len() / d;
        for p in have..len {
            for i in 0..d {
                let angle = p as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                rows.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
        rows[..len * d].to_vec()
    };
    Matrix::from_fn(len, d, |p, i| F::from_f64(flat[p * d + i]))
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<(), ModelError> {
    for &id in ids {
        if id as usize >= vocab {
            return Err(ModelError::TokenOutOfRange { id, vocab });
        }
    }
    Ok(())
}

/// Everything `backward` needs from one forward build: the tape, the
/// logits node, and the leaf node of every parameter that was touched.
struct Built<'a, F: Real> {
    graph: Graph<'a, F>,
    logits: NodeId,
    leaves: Vec<(String, NodeId)>,
}

struct Builder<'a, 'c, F: Real> {
    graph: Graph<'a, F>,
    params: &'a ModelParameters<F>,
    config: &'c TransformerConfig,
    leaves: Vec<(String, NodeId)>,
    leaf_index: HashMap<String, NodeId>,
    drop_rng: Option<Stream>,
}

impl<'a, F: Real> Builder<'a, '_, F> {
    fn leaf(&mut self, name: &str) -> Result<NodeId, ModelError> {
        if let Some(&id) = self.leaf_index.get(name) {
            return Ok(id);
        }
        let tensor = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingParameter(name.to_owned()))?;
        let id = self.graph.leaf(tensor);
        self.leaves.push((name.to_owned(), id));
        self.leaf_index.insert(name.to_owned(), id);
        Ok(id)
    }

    /// Applies inverted dropout in train mode; identity in eval mode.
    fn dropout(&mut self, x: NodeId) -> NodeId {
        let rate = self.config.dropout_rate;
        let Some(rng) = self.drop_rng.as_mut() else {
            return x;
        };
        if rate == 0.0 {
            return x;
        }
        let (rows, cols) = self.graph.value(x).shape();
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let mut mask = Matrix::zeros(rows, cols);
        for v in mask.as_mut_slice() {
            let u: f64 = rng.random();
            *v = if u < rate { F::zero() } else { keep };
        }
        self.graph.dropout(x, mask)
    }

    /// x → LayerNorm(x + Dropout(sub)) with the named gain/bias.
    fn sublayer(&mut self, x: NodeId, sub: NodeId, ln: &str) -> Result<NodeId, ModelError> {
        let dropped = self.dropout(sub);
        let summed = self.graph.add(x, dropped);
        let gain = self.leaf(&format!("{ln}.gain"))?;
        let bias = self.leaf(&format!("{ln}.bias"))?;
        Ok(self
            .graph
            .layer_norm(summed, gain, bias, F::from_f64(LAYER_NORM_EPS)))
    }

    /// Multi-head attention reading queries from `q_in` and keys/values
    /// from `kv_in`; `causal` masks strictly-future key positions.
    fn attention(
        &mut self,
        prefix: &str,
        q_in: NodeId,
        kv_in: NodeId,
        causal: bool,
    ) -> Result<NodeId, ModelError> {
        let project = |b: &mut Self, input: NodeId, w: &str, bias: &str| -> Result<NodeId, ModelError> {
            let w = b.leaf(&format!("{prefix}.{w}"))?;
            let bias = b.leaf(&format!("{prefix}.{bias}"))?;
            let prod = b.graph.matmul(input, w);
            Ok(b.graph.add_row_broadcast(prod, bias))
        };
        let q = project(self, q_in, "wq", "bq")?;
        let k = project(self, kv_in, "wk", "bk")?;
        let v = project(self, kv_in, "wv", "bv")?;

        let dh = self.config.head_dim();
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let t_q = self.graph.value(q).rows();
        let t_k = self.graph.value(k).rows();
        let mask = causal.then(|| {
            let m = Matrix::from_fn(t_q, t_k, |i, j| {
                if j > i {
                    F::from_f64(MASK_VALUE)
                } else {
                    F::zero()
                }
            });
            self.graph.constant(m)
        });

        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let qh = self.graph.slice_cols(q, h * dh, dh);
            let kh = self.graph.slice_cols(k, h * dh, dh);
            let vh = self.graph.slice_cols(v, h * dh, dh);
            let scores = self.graph.matmul_nt(qh, kh);
            let mut scores = self.graph.scale(scores, scale);
            if let Some(mask) = mask {
                scores = self.graph.add(scores, mask);
            }
            let probs = self.graph.softmax_rows(scores);
            let probs = self.dropout(probs);
            heads.push(self.graph.matmul(probs, vh));
        }
        let merged = self.graph.concat_cols(&heads);
        let wo = self.leaf(&format!("{prefix}.wo"))?;
        let bo = self.leaf(&format!("{prefix}.bo"))?;
        let prod = self.graph.matmul(merged, wo);
        Ok(self.graph.add_row_broadcast(prod, bo))
    }

    fn feed_forward(&mut self, prefix: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let w1 = self.leaf(&format!("{prefix}.w1"))?;
        let b1 = self.leaf(&format!("{prefix}.b1"))?;
        let w2 = self.leaf(&format!("{prefix}.w2"))?;
        let b2 = self.leaf(&format!("{prefix}.b2"))?;
        let h = self.graph.matmul(x, w1);
        let h = self.graph.add_row_broadcast(h, b1);
        let h = self.graph.relu(h);
        let h = self.dropout(h);
        let out = self.graph.matmul(h, w2);
        Ok(self.graph.add_row_broadcast(out, b2))
    }

    /// Embedding lookup scaled by √d_model plus sinusoidal positions.
    fn embed(&mut self, ids: &[u32]) -> Result<NodeId, ModelError> {
        let table = self.leaf("embed")?;
        let gathered = self.graph.gather_rows(table, ids);
        let scaled = self
            .graph
            .scale(gathered, F::from_f64((self.config.d_model as f64).sqrt()));
        let pos = positional(ids.len(), self.config.d_model);
        let pos = self.graph.constant(pos);
        Ok(self.graph.add(scaled, pos))
    }
}

fn build_forward<'a, F: Real>(
    params: &'a ModelParameters<F>,
    config: &TransformerConfig,
    context_ids: &[u32],
    context_len: usize,
    decoder_input: &[u32],
    mode: Mode,
) -> Result<Built<'a, F>, ModelError> {
    config.validate()?;
    if context_len > context_ids.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "context_len {} exceeds context of {}",
            context_len,
            context_ids.len()
        )));
    }
    let context = &context_ids[..context_len];
    if context.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    if decoder_input.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    for (ids, len) in [(context, context_len), (decoder_input, decoder_input.len())] {
        check_ids(ids, config.vocab_size)?;
        if len > config.max_positions {
            return Err(ModelError::SequenceTooLong {
                len,
                max: config.max_positions,
            });
        }
    }

    let drop_rng = match mode {
        Mode::Eval => None,
        Mode::Train {
            seed,
            step,
            example,
        } => Some(rng::stream(seed, &[tag::DROPOUT, step, example])),
    };
    let mut b = Builder {
        graph: Graph::new(),
        params,
        config,
        leaves: Vec::new(),
        leaf_index: HashMap::new(),
        drop_rng,
    };

    // Encoder stack over the (unpadded) context.
    let mut x = b.embed(context)?;
    for i in 0..config.num_layers {
        let attn = b.attention(&format!("enc.{i}.attn"), x, x, false)?;
        x = b.sublayer(x, attn, &format!("enc.{i}.ln1"))?;
        let ffn = b.feed_forward(&format!("enc.{i}.ffn"), x)?;
        x = b.sublayer(x, ffn, &format!("enc.{i}.ln2"))?;
    }
    let memory = x;

    // Decoder stack over the BOS-prefixed target.
    let mut y = b.embed(decoder_input)?;
    for i in 0..config.num_layers {
        let self_attn = b.attention(&format!("dec.{i}.self_attn"), y, y, true)?;
        y = b.sublayer(y, self_attn, &format!("dec.{i}.ln1"))?;
        let cross = b.attention(&format!("dec.{i}.cross_attn"), y, memory, false)?;
        y = b.sublayer(y, cross, &format!("dec.{i}.ln2"))?;
        let ffn = b.feed_forward(&format!("dec.{i}.ffn"), y)?;
        y = b.sublayer(y, ffn, &format!("dec.{i}.ln3"))?;
    }

    let out_w = b.leaf("out.w")?;
    let out_b = b.leaf("out.b")?;
    let prod = b.graph.matmul(y, out_w);
    let logits = b.graph.add_row_broadcast(prod, out_b);

    Ok(Built {
        graph: b.graph,
        logits,
        leaves: b.leaves,
    })
}

/// Runs the model and returns logits of shape (decoder_len, vocab_size).
/// `context_ids[context_len..]` is padding and never influences the
/// output.
pub fn forward<F: Real>(
    params: &ModelParameters<F>,
    config: &TransformerConfig,
    context_ids: &[u32],
    context_len: usize,
    decoder_input: &[u32],
    mode: Mode,
) -> Result<Matrix<F>, ModelError> {
    let built = build_forward(params, config, context_ids, context_len, decoder_input, mode)?;
    Ok(built.graph.value(built.logits).clone())
}

/// Token-mean negative log-likelihood over unmasked positions, plus the
/// per-position losses (zero where masked).
pub fn nll_loss<F: Real>(
    logits: &Matrix<F>,
    targets: &[u32],
    mask: &[bool],
) -> Result<(F, Vec<F>), ModelError> {
    if logits.rows() != targets.len() || targets.len() != mask.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} logit rows vs {} targets vs {} mask entries",
            logits.rows(),
            targets.len(),
            mask.len()
        )));
    }
    check_ids(targets, logits.cols())?;
    let mut per_token = vec![F::zero(); targets.len()];
    let mut total = F::zero();
    let mut count = 0usize;
    for (t, (&target, &keep)) in targets.iter().zip(mask).enumerate() {
        if !keep {
            continue;
        }
        let mut row = logits.row(t).to_vec();
        log_softmax_in_place(&mut row);
        per_token[t] = -row[target as usize];
        total += per_token[t];
        count += 1;
    }
    if count == 0 {
        return Err(ModelError::EmptyTarget);
    }
    Ok((total / F::from_f64(count as f64), per_token))
}

/// One row of a padded batch viewed as real (unpadded) slices.
fn batch_row(batch: &Batch, i: usize) -> (&[u32], &[u32]) {
    (
        &batch.contexts[i][..batch.context_lens[i]],
        &batch.targets[i][..batch.target_lens[i]],
    )
}

/// Train-mode forward/backward over a batch. The loss is the token-level
/// micro-average: Σ per-token NLL / Σ non-pad target tokens. Gradients
/// are accumulated in a fixed order, so results are identical whatever
/// the thread count.
pub fn backward<F: Real>(
    params: &ModelParameters<F>,
    config: &TransformerConfig,
    batch: &Batch,
    seed: u64,
    step: u64,
) -> Result<(F, GradientSet<F>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let total_tokens: usize = (0..batch.len())
        .map(|i| batch.target_lens[i].saturating_sub(1))
        .sum();
    if total_tokens == 0 {
        return Err(ModelError::EmptyTarget);
    }
    let inv_total = F::from_f64(1.0 / total_tokens as f64);

    let indices: Vec<usize> = (0..batch.len()).collect();
    let per_example = crate::par::map(&indices, |_, &i| {
        let (context, target) = batch_row(batch, i);
        let decoder_input = &target[..target.len() - 1];
        let labels = &target[1..];
        let mode = Mode::Train {
            seed,
            step,
            example: i as u64,
        };
        let built = build_forward(params, config, context, context.len(), decoder_input, mode)?;
        let mask = vec![true; labels.len()];
        let log_probs = {
            let mut g = built.graph;
            let lp = g.log_softmax_rows(built.logits);
            let loss_node = g.nll_sum(lp, labels, &mask);
            let loss_value = g.value(loss_node).get(0, 0);
            if !loss_value.is_finite() {
                return Err(ModelError::NonFiniteLoss { example: i });
            }
            let mut grads = g.backward(loss_node, inv_total);
            let mut named: Vec<(String, Matrix<F>)> = Vec::with_capacity(built.leaves.len());
            for (name, node) in built.leaves {
                if let Some(grad) = grads.take(node) {
                    named.push((name, grad));
                }
            }
            (loss_value, named)
        };
        Ok(log_probs)
    });

    let mut grads = GradientSet::zeros_like(params);
    let mut loss_sum = F::zero();
    for result in per_example {
        let (loss, named) = result?;
        loss_sum += loss;
        for (name, grad) in named {
            grads.add_named(&name, &grad);
        }
    }
    Ok((loss_sum * inv_total, grads))
}

/// Mean per-token NLL over a set of pairs, in eval mode. Per-pair sums are
/// computed in the parameter precision, then accumulated in f64 in a fixed
/// order so the result is identical whatever the thread count.
pub fn mean_token_nll<F: Real>(
    params: &ModelParameters<F>,
    config: &TransformerConfig,
    pairs: &[crate::corpus::SequencePair],
) -> Result<f64, ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let per_pair = crate::par::map(pairs, |_, pair| {
        sequence_logprob(params, config, &pair.context, pair.context.len(), &pair.target)
            .map(|lp| (lp.to_f64(), pair.target.len() - 1))
    });
    let mut total_nll = 0.0f64;
    let mut total_tokens = 0usize;
    for result in per_pair {
        let (lp, tokens) = result?;
        total_nll -= lp;
        total_tokens += tokens;
    }
    Ok(total_nll / total_tokens as f64)
}

/// Σ_t log P(y_t | y_<t, x) for a BOS/EOS-framed target, in eval mode.
pub fn sequence_logprob<F: Real>(
    params: &ModelParameters<F>,
    config: &TransformerConfig,
    context_ids: &[u32],
    context_len: usize,
    target: &[u32],
) -> Result<F, ModelError> {
    if target.len() < 2 {
        return Err(ModelError::EmptyTarget);
    }
    let decoder_input = &target[..target.len() - 1];
    let labels = &target[1..];
    let logits = forward(
        params,
        config,
        context_ids,
        context_len,
        decoder_input,
        Mode::Eval,
    )?;
    let mask = vec![true; labels.len()];
    let (mean_nll, _) = nll_loss(&logits, labels, &mask)?;
    Ok(-mean_nll * F::from_f64(labels.len() as f64))
}
