//! `fgl pretrain` and `fgl finetune`: assemble data and a plan from the
//! prepared artifacts, run the training loop, and write the trace plus
//! best/last checkpoints under `runs/<strategy>-s<seed>/`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use fgl_core::corpus::{make_mass_pair, SequencePair};
use fgl_core::rng::{self, tag};
use fgl_core::tokenizer::Special;
use fgl_core::training::{
    load_checkpoint, read_trace, run_training, save_checkpoint, warm_start, Checkpoint, EvalSet,
    Init, TrainData, TrainSession, TraceRow, write_trace, VALID_SPLIT,
};

use crate::config::{Overrides, RunConfig, Stage};
use crate::usage;
use crate::workspace::{pair_cache_path, LockGuard, Prepared};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

pub fn run(
    stage: Stage,
    overrides: &Overrides,
    checkpoint: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::resolve(overrides)?;
    let plan = cfg.train_plan(stage)?;
    let _lock = LockGuard::acquire(cfg.out_dir())?;

    let prepared = Prepared::load(cfg.out_dir())?;
    let vocab_checksum = prepared.vocab.checksum();
    let config = cfg.model_config(prepared.vocab.size());
    let pad_id = prepared.vocab.special(Special::Pad);

    let (data, eval_sets) = match stage {
        Stage::Pretrain => pretrain_data(&cfg, &prepared, &plan)?,
        Stage::Finetune => finetune_data(&cfg, &prepared, &plan)?,
    };
    let session = TrainSession {
        config: &config,
        data: &data,
        eval_sets: &eval_sets,
        pad_id,
        vocab_checksum: &vocab_checksum,
    };

    // Warm-start strategies take their starting point (and, for wd-pre, the
    // penalty reference) from --checkpoint; a resume additionally restores
    // optimizer and scheduler state from --resume.
    let mut theta_pre = None;
    if plan.lambda.is_some() {
        let path = checkpoint.ok_or_else(|| {
            crate::UsageError("strategy wd-pre needs --checkpoint for its reference".into())
        })?;
        theta_pre = Some(warm_start(&load_checkpoint(path)?, &vocab_checksum, &config)?);
    }
    let (init, resumed_from) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let epoch = ck.meta.epoch;
            (Init::Resume(Box::new(ck)), Some(epoch))
        }
        None if plan.strategy.starts_from_pretrained() => {
            let path = checkpoint.ok_or_else(|| {
                crate::UsageError(format!(
                    "strategy {} warm-starts from a pretrained model; pass --checkpoint",
                    plan.strategy
                ))
            })?;
            let params = warm_start(&load_checkpoint(path)?, &vocab_checksum, &config)?;
            (Init::FromParams(params), None)
        }
        None => {
            if checkpoint.is_some() {
                usage!(
                    "strategy {} starts from random initialization; --checkpoint is not used",
                    plan.strategy
                );
            }
            (Init::Random, None)
        }
    };

    let run_dir = cfg
        .out_dir()
        .join("runs")
        .join(format!("{}-s{}", plan.strategy, plan.seed));
    std::fs::create_dir_all(&run_dir)
        .with_context(|| format!("cannot create {}", run_dir.display()))?;

    let outcome = run_training(&plan, &session, init, theta_pre.as_ref())?;

    let trace_path = run_dir.join(TRACE_FILE);
    let rows = match resumed_from {
        // A resumed outcome reports only the new epochs; splice them onto
        // the rows recorded up to the checkpoint.
        Some(epoch) => {
            let mut rows: Vec<TraceRow> = read_trace(&trace_path)
                .unwrap_or_default()
                .into_iter()
                .filter(|row| row.epoch <= epoch)
                .collect();
            rows.extend(outcome.trace.iter().cloned());
            rows
        }
        None => outcome.trace.clone(),
    };
    write_trace(&trace_path, &rows)?;

    save_checkpoint(&run_dir.join(LAST_CHECKPOINT), &outcome.final_checkpoint)?;
    let best_path = run_dir.join(BEST_CHECKPOINT);
    if should_write_best(&best_path, resumed_from, &outcome.best_checkpoint) {
        save_checkpoint(&best_path, &outcome.best_checkpoint)?;
    }
    cfg.persist(&run_dir)?;

    println!(
        "{} (seed {}): {} epochs, best valid ppl {:.4} at epoch {}{}",
        plan.strategy,
        plan.seed,
        outcome.trace.last().map_or(0, |row| row.epoch),
        outcome.best_valid_ppl,
        outcome.best_epoch,
        if outcome.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    println!("wrote {}", run_dir.display());
    Ok(())
}

/// A fresh run always records its best checkpoint. A resumed run only
/// improves on the recorded best when the new epochs actually beat it;
/// otherwise the outcome falls back to the final parameters and the file
/// on disk stays.
fn should_write_best(best_path: &Path, resumed: Option<usize>, candidate: &Checkpoint) -> bool {
    if resumed.is_none() || !best_path.exists() {
        return true;
    }
    match load_checkpoint(best_path) {
        Ok(existing) => {
            let old = existing.meta.metrics.get(VALID_SPLIT);
            let new = candidate.meta.metrics.get(VALID_SPLIT);
            matches!((old, new), (Some(o), Some(n)) if n < o)
        }
        Err(_) => true,
    }
}

fn pretrain_data(
    cfg: &RunConfig,
    prepared: &Prepared,
    plan: &fgl_core::training::TrainPlan,
) -> Result<(TrainData, Vec<EvalSet>)> {
    use fgl_core::training::Strategy;
    let (train, valid) = match plan.strategy {
        Strategy::PretrainNs => (
            prepared.pairs(cfg.out_dir(), "pretrain-train")?,
            prepared.pairs(cfg.out_dir(), "pretrain-valid")?,
        ),
        Strategy::PretrainMass => {
            // Masked spans are drawn fresh per run from the cached
            // sentences, seeded by the plan.
            let mut rng = rng::stream(plan.seed, &[tag::MASS_MASK]);
            let fraction = cfg.corpus.mass_fraction.expect("resolved");
            let codec = prepared.codec();
            let mut mass = |sentences: Vec<String>| -> Vec<SequencePair> {
                sentences
                    .iter()
                    .filter_map(|s| make_mass_pair(&codec.encode(s), fraction, &codec, &mut rng))
                    .collect()
            };
            (
                mass(prepared.sentences(cfg.out_dir(), "pretrain-train")?),
                mass(prepared.sentences(cfg.out_dir(), "pretrain-valid")?),
            )
        }
        _ => unreachable!("train_plan validated the stage"),
    };
    let data = TrainData {
        target_train: train,
        pretrain_pool: Vec::new(),
    };
    let eval_sets = vec![EvalSet {
        name: VALID_SPLIT.to_string(),
        pairs: valid,
    }];
    Ok((data, eval_sets))
}

fn finetune_data(
    cfg: &RunConfig,
    prepared: &Prepared,
    plan: &fgl_core::training::TrainPlan,
) -> Result<(TrainData, Vec<EvalSet>)> {
    let target_train = prepared.pairs(cfg.out_dir(), "dialogue-train")?;
    let valid = prepared.pairs(cfg.out_dir(), "dialogue-valid")?;
    let pretrain_pool = if plan.mix.is_some() {
        let pool = prepared.pairs(cfg.out_dir(), "pretrain-train")?;
        if pool.is_empty() {
            bail!("strategy {} mixes pretraining data, but the pretrain-train cache is empty",
                plan.strategy);
        }
        pool
    } else {
        Vec::new()
    };
    let mut eval_sets = vec![EvalSet {
        name: VALID_SPLIT.to_string(),
        pairs: valid,
    }];
    // Track forgetting whenever a pretraining validation split was
    // prepared.
    if pair_cache_path(cfg.out_dir(), "pretrain-valid").exists() {
        eval_sets.push(EvalSet {
            name: "pretrain-valid".to_string(),
            pairs: prepared.pairs(cfg.out_dir(), "pretrain-valid")?,
        });
    }
    Ok((TrainData { target_train, pretrain_pool }, eval_sets))
}

/// Resolves a checkpoint argument that may name a run directory (its best
/// checkpoint) or a checkpoint file directly.
pub fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(BEST_CHECKPOINT)
    } else {
        path.to_path_buf()
    }
}

/// Like [`checkpoint_file`], but a directory resolves to its last
/// checkpoint: resuming continues where training stopped, not from the
/// best epoch.
pub fn resume_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(LAST_CHECKPOINT)
    } else {
        path.to_path_buf()
    }
}
