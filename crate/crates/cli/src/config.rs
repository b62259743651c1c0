//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags. The fully resolved configuration is written next
//! to every command's outputs so a run can always be reproduced from its
//! artifacts alone.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use fgl_core::corpus::DEFAULT_MAX_CONTEXT_TOKENS;
use fgl_core::decoding::{DecoderSettings, DEFAULT_TOP_K};
use fgl_core::model::TransformerConfig;
use fgl_core::probes::{
    TriggerStyle, DEFAULT_DROP_RATE, DEFAULT_SAMPLES_PER_TRIGGER, DEFAULT_TOKEN_BUDGET,
};
use fgl_core::training::{MixSpec, SchedulerKind, Strategy, TrainPlan};

use crate::usage;
use crate::UsageError;

/// Default output root when neither `--out`, the config file, nor `FGL_OUT`
/// names one.
pub const DEFAULT_OUT_DIR: &str = "fgl-out";

/// Top-level run configuration. Every key has a default, so an empty file
/// (or none at all) is valid; unknown keys are rejected to catch typos.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for parameter init, epoch composition, sampling, and
    /// probes. Default 7.
    pub seed: Option<u64>,
    /// Output root; `--out` beats this, this beats `$FGL_OUT`, which beats
    /// `./fgl-out`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub pretrain: StageSection,
    pub finetune: StageSection,
    pub decoder: DecoderSection,
    pub probe: ProbeSection,
}

/// Where the raw corpora live and how contexts are windowed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Pretraining documents: one sentence per line, blank line between
    /// documents. No default; required to prepare pretraining data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_valid: Option<PathBuf>,
    /// Dialogue JSONL: one `{"utterances": [...]}` object per line. No
    /// default; required to prepare finetuning data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dialogue_train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dialogue_valid: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dialogue_test: Option<PathBuf>,
    /// Encoder inputs keep at most this many trailing tokens. Default 128.
    pub max_context_tokens: Option<usize>,
    /// Fraction of each sentence masked for span-reconstruction
    /// pretraining. Default 0.5.
    pub mass_fraction: Option<f64>,
}

/// Subword tokenizer settings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    /// Number of merge operations to learn. Default 500.
    pub num_merges: Option<usize>,
}

/// Model shape; the vocabulary size is bound when artifacts are prepared.
/// Defaults give the two-layer desk-scale model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Default 2.
    pub num_layers: Option<usize>,
    /// Default 4.
    pub num_heads: Option<usize>,
    /// Default 64.
    pub d_model: Option<usize>,
    /// Default 256.
    pub d_ff: Option<usize>,
    /// Default 0.1.
    pub dropout_rate: Option<f64>,
    /// Default 160.
    pub max_positions: Option<usize>,
}

/// Per-stage training settings; `[pretrain]` and `[finetune]` resolve
/// against different defaults (see [`StageDefaults`]).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    /// Defaults: `pretrain-ns` for `fgl pretrain`, `standard-finetune` for
    /// `fgl finetune`.
    pub strategy: Option<String>,
    /// Base learning rate. Defaults: 3e-3 pretrain, 1e-3 finetune.
    pub lr: Option<f64>,
    /// `inverse-sqrt` (pretrain default) or `plateau-halving` (finetune
    /// default).
    pub scheduler: Option<String>,
    /// Warmup steps for the inverse-sqrt schedule. Default 300.
    pub warmup: Option<u64>,
    /// Defaults: 10 pretrain, 20 finetune.
    pub max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping. Default 3.
    pub patience: Option<usize>,
    /// Default 8.
    pub batch_size: Option<usize>,
    /// Gradient clipping threshold; 0 disables. Default 5.
    pub max_grad_norm: Option<f64>,
    /// Pretraining pairs mixed per target pair in epoch 1. Default 4.
    pub mix_ratio: Option<f64>,
    /// Per-epoch decay of the mixed-in share. Default 0.7.
    pub mix_decay: Option<f64>,
    /// Weight of the pull toward the pretrained parameters (`wd-pre`
    /// only). Default 0.01.
    pub lambda: Option<f64>,
}

/// Sampling and search settings for generation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    /// Top-k cutoff. Default 30.
    pub k: Option<usize>,
    /// Maximum generated content tokens. Default 30.
    pub max_len: Option<usize>,
    /// Default 5.
    pub beam_width: Option<usize>,
}

/// Behavior-probe settings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Prepared split that drives perplexity, sensitivity, diversity, and
    /// function-space projection. Default `dialogue-test`.
    pub eval_split: Option<String>,
    /// Context-token drop rate for the sensitivity probe. Default 0.3.
    pub drop_rate: Option<f64>,
    /// Responses drawn per instantiated trigger. Default 10.
    pub samples_per_trigger: Option<usize>,
    /// Knowledge terms JSONL (`{"term": ..., "description": ...}`); no
    /// default — the knowledge probe reports an error without it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terms: Option<PathBuf>,
    /// Optional trigger-template file; built-in templates otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    /// Trigger style, `news` or `dialogue`. Default `news`.
    pub style: Option<String>,
    /// Eval contexts sampled for the diversity probe. Default 100.
    pub diversity_contexts: Option<usize>,
    /// Checkpoint projection space, `parameter` or `function`. Default
    /// `parameter`.
    pub projection_space: Option<String>,
    /// Reference tokens scored per split for function-space vectors.
    /// Default 1000.
    pub token_budget: Option<usize>,
}

/// Flag overrides shared by every subcommand; `None` means "not given".
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML run configuration; flags override file values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root (also settable via FGL_OUT).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Training strategy for the invoked stage.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Mix-review ratio.
    #[arg(long)]
    pub mix_ratio: Option<f64>,
    /// Mix-review per-epoch decay.
    #[arg(long)]
    pub mix_decay: Option<f64>,
    /// wd-pre penalty weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Base learning rate for the invoked stage.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Top-k sampling cutoff.
    #[arg(long)]
    pub k: Option<usize>,
}

/// Which stage a training command resolves against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

struct StageDefaults {
    strategy: &'static str,
    lr: f64,
    scheduler: &'static str,
    max_epochs: usize,
}

impl Stage {
    fn defaults(self) -> StageDefaults {
        match self {
            Stage::Pretrain => StageDefaults {
                strategy: "pretrain-ns",
                lr: 3e-3,
                scheduler: "inverse-sqrt",
                max_epochs: 10,
            },
            Stage::Finetune => StageDefaults {
                strategy: "standard-finetune",
                lr: 1e-3,
                scheduler: "plateau-halving",
                max_epochs: 20,
            },
        }
    }
}

impl RunConfig {
    /// Loads the file named by `--config` (if any), applies the flag
    /// overrides, and fills every remaining `None` with its documented
    /// default so the result serializes as a complete record.
    pub fn resolve(overrides: &Overrides) -> Result<RunConfig> {
        let mut cfg = match &overrides.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config file {}", path.display()))?;
                toml::from_str::<RunConfig>(&text).map_err(|e| {
                    UsageError(format!("invalid config file {}: {e}", path.display()))
                })?
            }
            None => RunConfig::default(),
        };
        cfg.apply_flags(overrides);
        cfg.fill_defaults();
        Ok(cfg)
    }

    fn apply_flags(&mut self, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
        // Stage flags land on both stages; each command reads only its own
        // section, and a strategy never matches the opposite stage anyway.
        for stage in [&mut self.pretrain, &mut self.finetune] {
            if o.strategy.is_some() {
                stage.strategy = o.strategy.clone();
            }
            if o.mix_ratio.is_some() {
                stage.mix_ratio = o.mix_ratio;
            }
            if o.mix_decay.is_some() {
                stage.mix_decay = o.mix_decay;
            }
            if o.lambda.is_some() {
                stage.lambda = o.lambda;
            }
            if o.lr.is_some() {
                stage.lr = o.lr;
            }
        }
        if o.k.is_some() {
            self.decoder.k = o.k;
        }
    }

    fn fill_defaults(&mut self) {
        self.seed.get_or_insert(7);
        if self.out_dir.is_none() {
            self.out_dir = Some(match std::env::var_os("FGL_OUT") {
                Some(dir) if !dir.is_empty() => PathBuf::from(dir),
                _ => PathBuf::from(DEFAULT_OUT_DIR),
            });
        }
        self.corpus
            .max_context_tokens
            .get_or_insert(DEFAULT_MAX_CONTEXT_TOKENS);
        self.corpus.mass_fraction.get_or_insert(0.5);
        self.tokenizer.num_merges.get_or_insert(500);
        self.model.num_layers.get_or_insert(2);
        self.model.num_heads.get_or_insert(4);
        self.model.d_model.get_or_insert(64);
        self.model.d_ff.get_or_insert(256);
        self.model.dropout_rate.get_or_insert(0.1);
        self.model.max_positions.get_or_insert(160);
        for (stage, section) in [
            (Stage::Pretrain, &mut self.pretrain),
            (Stage::Finetune, &mut self.finetune),
        ] {
            let d = stage.defaults();
            section.strategy.get_or_insert_with(|| d.strategy.into());
            section.lr.get_or_insert(d.lr);
            section.scheduler.get_or_insert_with(|| d.scheduler.into());
            section.warmup.get_or_insert(300);
            section.max_epochs.get_or_insert(d.max_epochs);
            section.patience.get_or_insert(3);
            section.batch_size.get_or_insert(8);
            section.max_grad_norm.get_or_insert(5.0);
            section.mix_ratio.get_or_insert(4.0);
            section.mix_decay.get_or_insert(0.7);
            section.lambda.get_or_insert(0.01);
        }
        self.decoder.k.get_or_insert(DEFAULT_TOP_K);
        self.decoder.max_len.get_or_insert(30);
        self.decoder.beam_width.get_or_insert(5);
        self.probe.eval_split.get_or_insert_with(|| "dialogue-test".into());
        self.probe.drop_rate.get_or_insert(DEFAULT_DROP_RATE);
        self.probe
            .samples_per_trigger
            .get_or_insert(DEFAULT_SAMPLES_PER_TRIGGER);
        self.probe.style.get_or_insert_with(|| "news".into());
        self.probe.diversity_contexts.get_or_insert(100);
        self.probe
            .projection_space
            .get_or_insert_with(|| "parameter".into());
        self.probe.token_budget.get_or_insert(DEFAULT_TOKEN_BUDGET);
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved")
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().expect("resolved")
    }

    pub fn max_context_tokens(&self) -> usize {
        self.corpus.max_context_tokens.expect("resolved")
    }

    /// The model shape with the vocabulary size bound in.
    pub fn model_config(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            num_layers: self.model.num_layers.expect("resolved"),
            num_heads: self.model.num_heads.expect("resolved"),
            d_model: self.model.d_model.expect("resolved"),
            d_ff: self.model.d_ff.expect("resolved"),
            dropout_rate: self.model.dropout_rate.expect("resolved"),
            vocab_size,
            max_positions: self.model.max_positions.expect("resolved"),
        }
    }

    pub fn decoder_settings(&self) -> DecoderSettings {
        DecoderSettings {
            k: self.decoder.k.expect("resolved"),
            max_len: self.decoder.max_len.expect("resolved"),
            beam_width: self.decoder.beam_width.expect("resolved"),
            seed: self.seed(),
        }
    }

    pub fn trigger_style(&self) -> Result<TriggerStyle> {
        match self.probe.style.as_deref().expect("resolved") {
            "news" => Ok(TriggerStyle::News),
            "dialogue" => Ok(TriggerStyle::Dialogue),
            other => usage!("unknown trigger style {other:?} (expected news or dialogue)"),
        }
    }

    /// Builds the train plan for one stage, validating the strategy against
    /// the invoking command.
    pub fn train_plan(&self, stage: Stage) -> Result<TrainPlan> {
        let section = match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Finetune => &self.finetune,
        };
        let strategy: Strategy = section
            .strategy
            .as_deref()
            .expect("resolved")
            .parse()
            .map_err(UsageError)?;
        let pretrains = matches!(strategy, Strategy::PretrainNs | Strategy::PretrainMass);
        match stage {
            Stage::Pretrain if !pretrains => {
                usage!("strategy {strategy} belongs to `fgl finetune`");
            }
            Stage::Finetune if pretrains => {
                usage!("strategy {strategy} belongs to `fgl pretrain`");
            }
            _ => {}
        }
        let scheduler = match section.scheduler.as_deref().expect("resolved") {
            "inverse-sqrt" => SchedulerKind::InverseSqrt {
                warmup: section.warmup.expect("resolved"),
            },
            "plateau-halving" => SchedulerKind::PlateauHalving,
            other => {
                usage!("unknown scheduler {other:?} (expected inverse-sqrt or plateau-halving)")
            }
        };
        let clip = section.max_grad_norm.expect("resolved");
        Ok(TrainPlan {
            strategy,
            base_lr: section.lr.expect("resolved"),
            scheduler,
            mix: strategy.mixes_pretrain_data().then(|| MixSpec {
                ratio: section.mix_ratio.expect("resolved"),
                decay: section.mix_decay.expect("resolved"),
            }),
            lambda: matches!(strategy, Strategy::WdPre)
                .then(|| section.lambda.expect("resolved")),
            max_epochs: section.max_epochs.expect("resolved"),
            patience: section.patience.expect("resolved"),
            batch_size: section.batch_size.expect("resolved"),
            max_grad_norm: (clip > 0.0).then_some(clip),
            seed: self.seed(),
        })
    }

    /// Serializes the resolved configuration next to a command's outputs.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serialize resolved config")?;
        let path = dir.join("config.toml");
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}
