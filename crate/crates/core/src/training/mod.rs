//! Training: the Adam optimizer, learning-rate schedules, the finetuning
//! strategies (standard, mix-review, parameter-space weight decay, and the
//! mix-train ablation), pretraining, early stopping, checkpointing, and the
//! per-epoch evaluation traces the forgetting analyses are read from.
//!
//! Reproducibility contract: a run is fully determined by its [`TrainPlan`]
//! (including the seed), the initialization, and the data. Epoch composition
//! draws from `(seed, EPOCH_COMPOSE, epoch)` and dropout from
//! `(seed, DROPOUT, step, example)`, with epoch and step counted absolutely,
//! so strategies that degenerate into one another (mix-review at ratio 0 vs.
//! standard finetuning, λ = 0 weight decay) produce bit-identical
//! trajectories — and a resumed run continues exactly where the original
//! would have gone.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, MixSchedule, SequencePair, batchify, compose_epoch};
use crate::model::{
    GradientSet, ModelError, ModelParameters, TransformerConfig, init_parameters, mean_token_nll,
    parameter_shapes,
};
use crate::rng::{self, tag};
use crate::tensor::Real;

mod adam;
mod checkpoint;
mod schedule;

pub use adam::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS, AdamState, adam_step};
pub use checkpoint::{
    AdamMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, Checkpoint, CheckpointMeta, load_checkpoint,
    save_checkpoint, warm_start,
};
pub use schedule::{PlateauState, lr_inverse_sqrt, lr_plateau_halve};

/// Name of the evaluation set used for model selection, early stopping, and
/// plateau detection.
pub const VALID_SPLIT: &str = "valid";

/// Default number of validations without improvement before stopping.
pub const DEFAULT_PATIENCE: usize = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training plan: {0}")]
    InvalidPlan(String),
    #[error("evaluation set {0:?} is required but was not provided")]
    MissingEvalSet(String),
    #[error("tensor {name:?} is missing")]
    MissingTensor { name: String },
    #[error("tensor {name:?} has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("gradient for {name:?} is not finite at step {step}")]
    NonFiniteGradient { name: String, step: u64 },
    #[error("vocabulary checksum mismatch: this run has {run}, the checkpoint has {checkpoint}")]
    VocabChecksumMismatch { run: String, checkpoint: String },
    #[error("checkpoint model configuration does not match this run")]
    ConfigMismatch,
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint is internally inconsistent: {0}")]
    InconsistentCheckpoint(String),
    #[error("trace line {line}: {message}")]
    MalformedTrace { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// What a run optimizes and where it starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Finetune a pretrained model on the target task only.
    StandardFinetune,
    /// Finetune while mixing a decaying sample of pretraining data into
    /// every epoch.
    MixReview,
    /// Finetune with an L2 penalty pulling parameters toward the pretrained
    /// reference.
    WdPre,
    /// Same data mixing as mix-review, but from random initialization.
    MixTrain,
    /// Pretrain on next-sentence pairs.
    PretrainNs,
    /// Pretrain on masked-span reconstruction pairs.
    PretrainMass,
    /// Train on the target task only, from random initialization.
    ScratchBaseline,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::StandardFinetune,
        Strategy::MixReview,
        Strategy::WdPre,
        Strategy::MixTrain,
        Strategy::PretrainNs,
        Strategy::PretrainMass,
        Strategy::ScratchBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::StandardFinetune => "standard-finetune",
            Strategy::MixReview => "mix-review",
            Strategy::WdPre => "wd-pre",
            Strategy::MixTrain => "mix-train",
            Strategy::PretrainNs => "pretrain-ns",
            Strategy::PretrainMass => "pretrain-mass",
            Strategy::ScratchBaseline => "scratch-baseline",
        }
    }

    /// Strategies that warm-start from pretrained parameters; the rest
    /// start from random initialization.
    pub fn starts_from_pretrained(self) -> bool {
        matches!(
            self,
            Strategy::StandardFinetune | Strategy::MixReview | Strategy::WdPre
        )
    }

    pub fn mixes_pretrain_data(self) -> bool {
        matches!(self, Strategy::MixReview | Strategy::MixTrain)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Strategy::ALL.iter().map(|st| st.name()).collect();
                format!("unknown strategy {s:?} (expected one of: {})", known.join(", "))
            })
    }
}

/// Learning-rate schedule selection. Inverse-square-root (with warmup) is
/// the pretraining default; halve-on-plateau is the finetuning default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    InverseSqrt { warmup: u64 },
    PlateauHalving,
}

/// Mix-review knobs. The full [`MixSchedule`] also needs the target corpus
/// size, which is bound when the run starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub ratio: f64,
    pub decay: f64,
}

/// Everything that determines a training trajectory plus the stopping
/// policy. Serialized into checkpoints and run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub strategy: Strategy,
    pub base_lr: f64,
    pub scheduler: SchedulerKind,
    pub mix: Option<MixSpec>,
    pub lambda: Option<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidPlan(msg));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive and finite, got {}", self.base_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if let SchedulerKind::InverseSqrt { warmup } = self.scheduler {
            if warmup == 0 {
                return bad("warmup must be at least 1 step".into());
            }
        }
        match (self.strategy.mixes_pretrain_data(), &self.mix) {
            (true, None) => {
                return bad(format!("{} requires a mix schedule", self.strategy));
            }
            (false, Some(_)) => {
                return bad(format!(
                    "a mix schedule only applies to mix-review and mix-train, not {}",
                    self.strategy
                ));
            }
            (true, Some(spec)) => {
                MixSchedule::new(spec.ratio, spec.decay, 1)
                    .map_err(|e| TrainError::InvalidPlan(e.to_string()))?;
            }
            (false, None) => {}
        }
        match (self.strategy == Strategy::WdPre, self.lambda) {
            (true, None) => return bad("wd-pre requires lambda".into()),
            (false, Some(_)) => {
                return bad(format!("lambda only applies to wd-pre, not {}", self.strategy));
            }
            (true, Some(l)) if !(l >= 0.0 && l.is_finite()) => {
                return bad(format!("lambda must be nonnegative and finite, got {l}"));
            }
            _ => {}
        }
        if let Some(norm) = self.max_grad_norm {
            if !(norm > 0.0 && norm.is_finite()) {
                return bad(format!("max_grad_norm must be positive and finite, got {norm}"));
            }
        }
        Ok(())
    }

    /// True when two plans walk the same parameter trajectory step for
    /// step. Stopping policy (max_epochs, patience) is excluded, which is
    /// what lets a resumed run extend training.
    pub fn same_trajectory(&self, other: &TrainPlan) -> bool {
        self.strategy == other.strategy
            && self.base_lr == other.base_lr
            && self.scheduler == other.scheduler
            && self.mix == other.mix
            && self.lambda == other.lambda
            && self.batch_size == other.batch_size
            && self.max_grad_norm == other.max_grad_norm
            && self.seed == other.seed
    }
}

/// Mid-run scalars carried in checkpoints so a resumed process continues
/// with identical scheduler and early-stopping behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub current_lr: f64,
    pub best_valid_ppl: Option<f64>,
    pub epochs_without_improvement: usize,
}

/// Encoded training material: the target-task pairs trained on every epoch
/// and the pretraining pool that mixing strategies sample from.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub target_train: Vec<SequencePair>,
    pub pretrain_pool: Vec<SequencePair>,
}

/// A named held-out set evaluated once per epoch. The set named
/// [`VALID_SPLIT`] drives selection and early stopping.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub pairs: Vec<SequencePair>,
}

/// Run-wide context shared by every strategy.
#[derive(Debug, Clone, Copy)]
pub struct TrainSession<'a> {
    pub config: &'a TransformerConfig,
    pub data: &'a TrainData,
    pub eval_sets: &'a [EvalSet],
    pub pad_id: u32,
    pub vocab_checksum: &'a str,
}

/// Where the parameters come from.
#[derive(Debug, Clone)]
pub enum Init {
    /// Fresh parameters drawn from the plan seed.
    Random,
    /// Warm start from the given parameters with a fresh optimizer (see
    /// [`warm_start`] for extracting them from a checkpoint).
    FromParams(ModelParameters<f32>),
    /// Continue an interrupted run: parameters, optimizer moments, and
    /// scheduler state are all restored.
    Resume(Box<Checkpoint>),
}

/// One evaluation record. Row 0 is the pre-training evaluation of the
/// initial parameters; every later row follows one epoch of updates.
/// `lr` is the rate used for the epoch's final step (for row 0, the rate
/// the first step would use). Loss fields cover the epoch's training
/// batches: `train_nll` is the mean per-batch token-averaged NLL, and for
/// wd-pre runs `penalty` and `total_loss = train_nll + penalty` report the
/// loss decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub lr: f64,
    pub splits: BTreeMap<String, f64>,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_loss: Option<f64>,
}

/// Write a metric trace as JSONL, one row per line.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<(), TrainError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("trace rows serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read a JSONL metric trace written by [`write_trace`].
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| TrainError::MalformedTrace {
            line: idx + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// L2 pull toward a pretrained reference: penalty λ·Σ(θ−θ_pre)² and its
/// gradient 2λ(θ−θ_pre), to be added to the data gradient.
pub fn wd_pre<F: Real>(
    params: &ModelParameters<F>,
    theta_pre: &ModelParameters<F>,
    lambda: f64,
) -> Result<(f64, GradientSet<F>), TrainError> {
    let mut penalty = 0.0f64;
    let mut grads = GradientSet::zeros_like(params);
    let two_lambda = F::from_f64(2.0 * lambda);
    for (name, param) in params.iter() {
        let reference = theta_pre
            .get(name)
            .ok_or_else(|| TrainError::MissingTensor { name: name.clone() })?;
        if reference.rows() != param.rows() || reference.cols() != param.cols() {
            return Err(TrainError::ShapeMismatch {
                name: name.clone(),
                expected: (param.rows(), param.cols()),
                actual: (reference.rows(), reference.cols()),
            });
        }
        let grad = grads.get_mut(name).expect("zeros_like mirrors params");
        let (gs, ps, rs) = (grad.as_mut_slice(), param.as_slice(), reference.as_slice());
        for i in 0..ps.len() {
            let diff = ps[i] - rs[i];
            gs[i] = two_lambda * diff;
            let d = diff.to_f64();
            penalty += lambda * d * d;
        }
    }
    if theta_pre.len() != params.len() {
        let name = theta_pre
            .iter()
            .map(|(n, _)| n)
            .find(|n| params.get(n).is_none())
            .cloned()
            .unwrap_or_default();
        return Err(TrainError::MissingTensor { name });
    }
    Ok((penalty, grads))
}

/// Scale all gradients down to a global L2 norm of `max_norm` when they
/// exceed it.
fn clip_gradients(grads: &mut GradientSet<f32>, max_norm: f64) {
    let mut sum_sq = 0.0f64;
    for (_, tensor) in grads.iter() {
        for &g in tensor.as_slice() {
            sum_sq += f64::from(g) * f64::from(g);
        }
    }
    let norm = sum_sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for (_, tensor) in grads.iter_mut() {
            for g in tensor.as_mut_slice() {
                *g *= scale;
            }
        }
    }
}

/// Result of a run: the last state, the best state by validation
/// perplexity, and the full evaluation trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    pub best_epoch: usize,
    pub best_valid_ppl: f64,
    pub stopped_early: bool,
}

fn verify_parameters(
    params: &ModelParameters<f32>,
    config: &TransformerConfig,
) -> Result<(), TrainError> {
    let expected = parameter_shapes(config);
    for (name, &(rows, cols)) in &expected {
        let tensor = params
            .get(name)
            .ok_or_else(|| TrainError::MissingTensor { name: name.clone() })?;
        if tensor.rows() != rows || tensor.cols() != cols {
            return Err(TrainError::ShapeMismatch {
                name: name.clone(),
                expected: (rows, cols),
                actual: (tensor.rows(), tensor.cols()),
            });
        }
    }
    if params.len() != expected.len() {
        let extra = params
            .iter()
            .map(|(n, _)| n)
            .find(|n| !expected.contains_key(*n))
            .cloned()
            .unwrap_or_default();
        return Err(TrainError::InvalidPlan(format!(
            "unexpected tensor {extra:?} in the provided parameters"
        )));
    }
    Ok(())
}

fn next_lr(plan: &TrainPlan, last_step: u64, plateau: &PlateauState) -> f64 {
    match plan.scheduler {
        SchedulerKind::InverseSqrt { warmup } => {
            lr_inverse_sqrt(last_step + 1, warmup, plan.base_lr)
        }
        SchedulerKind::PlateauHalving => plateau.lr(),
    }
}

struct BestSnapshot {
    params: ModelParameters<f32>,
    adam: AdamState<f32>,
    epoch: usize,
    step: u64,
    metrics: BTreeMap<String, f64>,
    lr: f64,
    valid_ppl: f64,
}

/// Run one training plan to completion (or early stop) and return the final
/// and best checkpoints plus the per-epoch trace.
pub fn run_training(
    plan: &TrainPlan,
    session: &TrainSession,
    init: Init,
    theta_pre: Option<&ModelParameters<f32>>,
) -> Result<TrainOutcome, TrainError> {
    plan.validate()?;
    session.config.validate()?;
    if session.data.target_train.is_empty() {
        return Err(TrainError::InvalidPlan("no training pairs".into()));
    }
    {
        let mut seen = std::collections::BTreeSet::new();
        for set in session.eval_sets {
            if set.pairs.is_empty() {
                return Err(TrainError::InvalidPlan(format!(
                    "evaluation set {:?} is empty",
                    set.name
                )));
            }
            if !seen.insert(set.name.as_str()) {
                return Err(TrainError::InvalidPlan(format!(
                    "duplicate evaluation set {:?}",
                    set.name
                )));
            }
        }
        if !seen.contains(VALID_SPLIT) {
            return Err(TrainError::MissingEvalSet(VALID_SPLIT.into()));
        }
    }
    match (&init, plan.strategy.starts_from_pretrained()) {
        (Init::Random, true) => {
            return Err(TrainError::InvalidPlan(format!(
                "{} starts from pretrained parameters; provide them",
                plan.strategy
            )));
        }
        (Init::FromParams(_), false) => {
            return Err(TrainError::InvalidPlan(format!(
                "{} starts from random initialization",
                plan.strategy
            )));
        }
        _ => {}
    }
    if plan.strategy == Strategy::WdPre && theta_pre.is_none() {
        return Err(TrainError::InvalidPlan(
            "wd-pre requires the pretrained reference parameters".into(),
        ));
    }
    if plan.strategy != Strategy::WdPre && theta_pre.is_some() {
        return Err(TrainError::InvalidPlan(format!(
            "a pretrained reference only applies to wd-pre, not {}",
            plan.strategy
        )));
    }
    if let Some(reference) = theta_pre {
        verify_parameters(reference, session.config)?;
    }

    let (ratio, decay) = match plan.mix {
        Some(spec) => (spec.ratio, spec.decay),
        None => (0.0, 1.0),
    };
    let schedule = MixSchedule::new(ratio, decay, session.data.target_train.len())?;

    let mut params: ModelParameters<f32>;
    let mut adam: AdamState<f32>;
    let mut plateau = PlateauState::new(plan.base_lr);
    let mut step: u64 = 0;
    let mut start_epoch: usize = 1;
    let mut best_valid = f64::INFINITY;
    let mut stale: usize = 0;
    let mut last_metrics: BTreeMap<String, f64>;
    let mut best: Option<BestSnapshot> = None;
    let mut trace: Vec<TraceRow> = Vec::new();
    let resumed: bool;

    match init {
        Init::Random => {
            params = init_parameters(session.config, plan.seed)?;
            adam = AdamState::new(&params);
            last_metrics = BTreeMap::new();
            resumed = false;
        }
        Init::FromParams(p) => {
            verify_parameters(&p, session.config)?;
            params = p;
            adam = AdamState::new(&params);
            last_metrics = BTreeMap::new();
            resumed = false;
        }
        Init::Resume(boxed) => {
            let ck = *boxed;
            if ck.meta.vocab_checksum != session.vocab_checksum {
                return Err(TrainError::VocabChecksumMismatch {
                    run: session.vocab_checksum.to_string(),
                    checkpoint: ck.meta.vocab_checksum,
                });
            }
            if ck.meta.config != *session.config {
                return Err(TrainError::ConfigMismatch);
            }
            if !plan.same_trajectory(&ck.meta.plan) {
                return Err(TrainError::InvalidPlan(
                    "resume plan would change the training trajectory recorded in the checkpoint"
                        .into(),
                ));
            }
            adam = ck.adam.ok_or_else(|| {
                TrainError::InvalidPlan("checkpoint has no optimizer state to resume from".into())
            })?;
            params = ck.params;
            step = ck.meta.step;
            start_epoch = ck.meta.epoch + 1;
            plateau = PlateauState::resume(
                ck.meta.train_state.current_lr,
                ck.meta.train_state.best_valid_ppl,
            );
            best_valid = ck.meta.train_state.best_valid_ppl.unwrap_or(f64::INFINITY);
            stale = ck.meta.train_state.epochs_without_improvement;
            last_metrics = ck.meta.metrics;
            resumed = true;
        }
    }

    let evaluate = |params: &ModelParameters<f32>| -> Result<BTreeMap<String, f64>, TrainError> {
        let mut splits = BTreeMap::new();
        for set in session.eval_sets {
            let nll = mean_token_nll(params, session.config, &set.pairs)?;
            splits.insert(set.name.clone(), nll.exp());
        }
        Ok(splits)
    };

    if !resumed {
        let t0 = Instant::now();
        let splits = evaluate(&params)?;
        let valid = splits[VALID_SPLIT];
        let lr0 = next_lr(plan, step, &plateau);
        best_valid = valid;
        best = Some(BestSnapshot {
            params: params.clone(),
            adam: adam.clone(),
            epoch: 0,
            step: 0,
            metrics: splits.clone(),
            lr: lr0,
            valid_ppl: valid,
        });
        lr_plateau_halve(&mut plateau, valid);
        last_metrics = splits.clone();
        trace.push(TraceRow {
            epoch: 0,
            lr: lr0,
            splits,
            wall_seconds: t0.elapsed().as_secs_f64(),
            train_nll: None,
            penalty: None,
            total_loss: None,
        });
    }

    let mut current_epoch = start_epoch - 1;
    let mut stopped_early = resumed && stale >= plan.patience;
    if !stopped_early {
        for epoch in start_epoch..=plan.max_epochs {
            let t0 = Instant::now();
            current_epoch = epoch;
            let mut rng = rng::stream(plan.seed, &[tag::EPOCH_COMPOSE, epoch as u64]);
            let pairs = compose_epoch(
                &session.data.target_train,
                &session.data.pretrain_pool,
                epoch,
                &schedule,
                &mut rng,
            )?;
            let batches = batchify(&pairs, plan.batch_size, session.pad_id);

            let mut nll_sum = 0.0f64;
            let mut penalty_sum = 0.0f64;
            let mut epoch_lr = next_lr(plan, step, &plateau);
            for batch in &batches {
                step += 1;
                epoch_lr = match plan.scheduler {
                    SchedulerKind::InverseSqrt { warmup } => {
                        lr_inverse_sqrt(step, warmup, plan.base_lr)
                    }
                    SchedulerKind::PlateauHalving => plateau.lr(),
                };
                let (loss, mut grads) =
                    crate::model::backward(&params, session.config, batch, plan.seed, step)?;
                nll_sum += f64::from(loss);
                if plan.strategy == Strategy::WdPre {
                    let reference = theta_pre.expect("validated above");
                    let lambda = plan.lambda.expect("validated above");
                    let (penalty, contribution) = wd_pre(&params, reference, lambda)?;
                    grads.add_assign_scaled(&contribution, 1.0);
                    penalty_sum += penalty;
                }
                if let Some(max_norm) = plan.max_grad_norm {
                    clip_gradients(&mut grads, max_norm);
                }
                adam_step(&mut params, &grads, &mut adam, epoch_lr)?;
            }

            let splits = evaluate(&params)?;
            let valid = splits[VALID_SPLIT];
            let steps_this_epoch = batches.len() as f64;
            let train_nll = nll_sum / steps_this_epoch;
            let (penalty, total_loss) = if plan.strategy == Strategy::WdPre {
                let p = penalty_sum / steps_this_epoch;
                (Some(p), Some(train_nll + p))
            } else {
                (None, None)
            };
            last_metrics = splits.clone();
            trace.push(TraceRow {
                epoch,
                lr: epoch_lr,
                splits: splits.clone(),
                wall_seconds: t0.elapsed().as_secs_f64(),
                train_nll: Some(train_nll),
                penalty,
                total_loss,
            });

            if valid < best_valid {
                best_valid = valid;
                stale = 0;
                best = Some(BestSnapshot {
                    params: params.clone(),
                    adam: adam.clone(),
                    epoch,
                    step,
                    metrics: splits,
                    lr: epoch_lr,
                    valid_ppl: valid,
                });
            } else {
                stale += 1;
            }
            lr_plateau_halve(&mut plateau, valid);
            if stale >= plan.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let meta = |epoch: usize,
                step: u64,
                metrics: BTreeMap<String, f64>,
                state: TrainState,
                adam: &AdamState<f32>| {
        CheckpointMeta {
            config: session.config.clone(),
            plan: plan.clone(),
            epoch,
            step,
            vocab_checksum: session.vocab_checksum.to_string(),
            rng_seed: plan.seed,
            metrics,
            train_state: state,
            adam: Some(AdamMeta::from(adam)),
        }
    };

    let final_state = TrainState {
        current_lr: next_lr(plan, step, &plateau),
        best_valid_ppl: best_valid.is_finite().then_some(best_valid),
        epochs_without_improvement: stale,
    };
    let final_checkpoint = Checkpoint {
        meta: meta(current_epoch, step, last_metrics, final_state, &adam),
        adam: Some(adam.clone()),
        params,
    };

    let best_checkpoint = match best {
        Some(snap) => Checkpoint {
            meta: meta(
                snap.epoch,
                snap.step,
                snap.metrics,
                TrainState {
                    current_lr: snap.lr,
                    best_valid_ppl: Some(snap.valid_ppl),
                    epochs_without_improvement: 0,
                },
                &snap.adam,
            ),
            adam: Some(snap.adam),
            params: snap.params,
        },
        None => final_checkpoint.clone(),
    };

    let best_epoch = best_checkpoint.meta.epoch;
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        trace,
        best_epoch,
        best_valid_ppl: best_valid,
        stopped_early,
    })
}

/// One grid-search result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub best_valid_ppl: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Grid-search outcome: the winning cell's index and full run, plus the
/// per-cell table.
#[derive(Debug)]
pub struct GridOutcome {
    pub best_index: usize,
    pub best: TrainOutcome,
    pub rows: Vec<GridRow>,
}

/// Run every labeled plan with the same starting point and pick the cell
/// with the lowest validation perplexity (first wins ties). All cells must
/// share one seed so they differ only in the knobs under study.
pub fn grid_search(
    cells: &[(String, TrainPlan)],
    session: &TrainSession,
    init: &Init,
    theta_pre: Option<&ModelParameters<f32>>,
) -> Result<GridOutcome, TrainError> {
    if cells.is_empty() {
        return Err(TrainError::InvalidPlan("empty grid".into()));
    }
    if cells.iter().any(|(_, p)| p.seed != cells[0].1.seed) {
        return Err(TrainError::InvalidPlan(
            "grid cells must share one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(cells.len());
    let mut winner: Option<(usize, TrainOutcome)> = None;
    for (index, (label, plan)) in cells.iter().enumerate() {
        let outcome = run_training(plan, session, init.clone(), theta_pre)?;
        rows.push(GridRow {
            label: label.clone(),
            best_valid_ppl: outcome.best_valid_ppl,
            best_epoch: outcome.best_epoch,
            stopped_early: outcome.stopped_early,
        });
        let better = match &winner {
            Some((_, incumbent)) => outcome.best_valid_ppl < incumbent.best_valid_ppl,
            None => true,
        };
        if better {
            winner = Some((index, outcome));
        }
    }
    let (best_index, best) = winner.expect("at least one cell");
    Ok(GridOutcome {
        best_index,
        best,
        rows,
    })
}
