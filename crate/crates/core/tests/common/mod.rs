//! Shared fixture for the acceptance suite: a synthetic topic-chain
//! language, two corpora drawn from it (news-like documents for
//! pretraining, dialogues for finetuning), and one full experiment —
//! pretrain, then standard / mix-review / scratch runs — per seed.
//!
//! The language is built so the expected effects are measurable at desk
//! scale. Every sentence ends with a marker word naming the next sentence's
//! topic cluster, so a model that reads context order beats one that
//! cannot. Dialogue utterances open with words of their own but quote runs
//! from the pretraining clusters: a warm start already knows which words
//! belong together, while the dialogue corpus alone is far too small to
//! teach that, and the opener shifts the token distribution enough that
//! finetuning without rehearsal still forgets the pretraining format.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use fgl_core::corpus::{make_dialogue_pairs, make_ns_pairs, Origin, SequencePair};
use fgl_core::model::TransformerConfig;
use fgl_core::rng::{self, tag, Stream};
use fgl_core::tokenizer::{build_vocabulary, learn_bpe, BpeModel, Codec, Special, Vocabulary};
use fgl_core::training::{
    run_training, EvalSet, Init, MixSpec, SchedulerKind, Strategy, TrainData, TrainOutcome,
    TrainPlan, TrainSession,
};

pub const SEEDS: [u64; 3] = [11, 12, 13];
const SYNTH_SEED: u64 = 31;

const A_TRAIN_DOCS: usize = 7000;
const A_VALID_DOCS: usize = 120;
// The dialogue task is deliberately low-resource: with this little target
// data a scratch model cannot match a warm start, which is the regime the
// finetuning strategies are about.
const B_TRAIN_DIALOGUES: usize = 48;
const B_VALID_DIALOGUES: usize = 40;
const B_TEST_DIALOGUES: usize = 40;
const NUM_MERGES: usize = 300;
const PRETRAIN_EPOCHS: usize = 3;
const FINETUNE_EPOCHS: usize = 8;

const SYLLABLES: [&str; 12] = [
    "ba", "ko", "mi", "ra", "tu", "sen", "lo", "vi", "da", "pe", "nu", "sha",
];

fn word(i: usize) -> String {
    format!("{}{}", SYLLABLES[(i / 12) % 12], SYLLABLES[i % 12])
}

/// Pretraining topic t ∈ 0..8 owns words 10t..10t+10.
fn a_cluster(t: usize) -> Vec<String> {
    (0..10).map(|k| word(10 * t + k)).collect()
}

fn a_marker(t: usize) -> String {
    word(10 * t)
}

/// Dialogue topic t ∈ 0..4 owns five opener words never seen in the
/// pretraining corpus.
fn b_cluster(t: usize) -> Vec<String> {
    (0..5).map(|k| word(80 + 5 * t + k)).collect()
}

/// One 4-sentence document: each sentence draws six words from its topic
/// cluster and closes with the next topic's marker.
fn gen_document(rng: &mut Stream) -> Vec<String> {
    let mut topic = rng.random_range(0..8usize);
    (0..4)
        .map(|_| {
            let next = if rng.random::<f64>() < 0.9 {
                (topic + 1) % 8
            } else {
                rng.random_range(0..8usize)
            };
            let cluster = a_cluster(topic);
            let mut words: Vec<String> = (0..6)
                .map(|_| cluster[rng.random_range(0..cluster.len())].clone())
                .collect();
            words.push(a_marker(next));
            topic = next;
            words.join(" ")
        })
        .collect()
}

/// One 5-utterance dialogue: each utterance opens with a word from the
/// current dialogue topic, quotes four words from the current pretraining
/// cluster, and closes with the marker of the next pretraining cluster —
/// the same linking rule the documents use, so the quoted runs are
/// predictable only for a model that knows the pretraining clusters and
/// reads the marker at the end of the previous utterance.
fn gen_dialogue(rng: &mut Stream) -> Vec<String> {
    let mut b_topic = rng.random_range(0..4usize);
    let mut a_topic = rng.random_range(0..8usize);
    (0..5)
        .map(|_| {
            let b_next = if rng.random::<f64>() < 0.9 {
                (b_topic + 1) % 4
            } else {
                rng.random_range(0..4usize)
            };
            let a_next = if rng.random::<f64>() < 0.9 {
                (a_topic + 1) % 8
            } else {
                rng.random_range(0..8usize)
            };
            let openers = b_cluster(b_topic);
            let quoted = a_cluster(a_topic);
            let mut words = vec![openers[rng.random_range(0..openers.len())].clone()];
            words.extend(
                (0..4).map(|_| quoted[rng.random_range(0..quoted.len())].clone()),
            );
            words.push(a_marker(a_next));
            b_topic = b_next;
            a_topic = a_next;
            words.join(" ")
        })
        .collect()
}

fn gen_documents(count: usize, salt: u64) -> Vec<Vec<String>> {
    let mut rng = rng::stream(SYNTH_SEED, &[tag::SYNTH, salt]);
    (0..count).map(|_| gen_document(&mut rng)).collect()
}

fn gen_dialogues(count: usize, salt: u64) -> Vec<Vec<String>> {
    let mut rng = rng::stream(SYNTH_SEED, &[tag::SYNTH, salt]);
    (0..count).map(|_| gen_dialogue(&mut rng)).collect()
}

/// One seed's worth of trained models.
pub struct SeedRun {
    pub seed: u64,
    pub standard: TrainOutcome,
    pub mix_review: TrainOutcome,
    pub scratch: TrainOutcome,
}

pub struct ToyLab {
    pub config: TransformerConfig,
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
    /// Raw corpus lines (sentences and utterances), for tokenizer checks.
    pub a_lines: Vec<String>,
    pub b_lines: Vec<String>,
    pub b_valid: Vec<SequencePair>,
    pub b_test: Vec<SequencePair>,
    pub runs: Vec<SeedRun>,
    pub build_seconds: f64,
}

impl ToyLab {
    pub fn codec(&self) -> Codec<'_> {
        Codec {
            bpe: &self.bpe,
            vocab: &self.vocab,
        }
    }
}

fn pretrain_plan(seed: u64) -> TrainPlan {
    TrainPlan {
        strategy: Strategy::PretrainNs,
        base_lr: 3e-3,
        scheduler: SchedulerKind::InverseSqrt { warmup: 300 },
        mix: None,
        lambda: None,
        max_epochs: PRETRAIN_EPOCHS,
        patience: PRETRAIN_EPOCHS,
        batch_size: 8,
        max_grad_norm: Some(5.0),
        seed,
    }
}

fn finetune_plan(strategy: Strategy, seed: u64) -> TrainPlan {
    let mix = strategy
        .mixes_pretrain_data()
        .then_some(MixSpec {
            ratio: 4.0,
            decay: 0.7,
        });
    TrainPlan {
        strategy,
        base_lr: 1e-3,
        scheduler: SchedulerKind::PlateauHalving,
        mix,
        lambda: None,
        max_epochs: FINETUNE_EPOCHS,
        patience: 2,
        batch_size: 8,
        max_grad_norm: Some(5.0),
        seed,
    }
}

fn build_lab() -> ToyLab {
    let start = Instant::now();

    let a_train_docs = gen_documents(A_TRAIN_DOCS, 0);
    let a_valid_docs = gen_documents(A_VALID_DOCS, 1);
    let b_train_dialogues = gen_dialogues(B_TRAIN_DIALOGUES, 2);
    let b_valid_dialogues = gen_dialogues(B_VALID_DIALOGUES, 3);
    let b_test_dialogues = gen_dialogues(B_TEST_DIALOGUES, 4);

    let a_lines: Vec<String> = a_train_docs
        .iter()
        .chain(&a_valid_docs)
        .flatten()
        .cloned()
        .collect();
    let b_lines: Vec<String> = b_train_dialogues
        .iter()
        .chain(&b_valid_dialogues)
        .chain(&b_test_dialogues)
        .flatten()
        .cloned()
        .collect();
    let mut all_lines = a_lines.clone();
    all_lines.extend(b_lines.iter().cloned());

    let bpe = learn_bpe(&all_lines, NUM_MERGES).expect("learn merges");
    let vocab = build_vocabulary(&bpe, &all_lines).expect("build vocabulary");
    let codec = Codec {
        bpe: &bpe,
        vocab: &vocab,
    };

    let ns = |docs: &[Vec<String>]| -> Vec<SequencePair> {
        docs.iter()
            .flat_map(|doc| make_ns_pairs(doc, &codec, 128, Origin::Pretrain))
            .collect()
    };
    let dia = |dialogues: &[Vec<String>]| -> Vec<SequencePair> {
        dialogues
            .iter()
            .flat_map(|d| make_dialogue_pairs(d, &codec, 128))
            .collect()
    };
    let a_train = ns(&a_train_docs);
    let a_valid = ns(&a_valid_docs);
    let b_train = dia(&b_train_dialogues);
    let b_valid = dia(&b_valid_dialogues);
    let b_test = dia(&b_test_dialogues);

    let config = TransformerConfig {
        num_layers: 2,
        num_heads: 4,
        d_model: 64,
        d_ff: 256,
        dropout_rate: 0.1,
        vocab_size: vocab.size(),
        max_positions: 160,
    };
    let checksum = vocab.checksum();
    let pad = vocab.special(Special::Pad);

    let pretrain_data = TrainData {
        target_train: a_train.clone(),
        pretrain_pool: Vec::new(),
    };
    let pretrain_evals = vec![EvalSet {
        name: "valid".into(),
        pairs: a_valid.clone(),
    }];
    let finetune_data = TrainData {
        target_train: b_train,
        pretrain_pool: a_train,
    };
    let finetune_evals = vec![
        EvalSet {
            name: "valid".into(),
            pairs: b_valid.clone(),
        },
        EvalSet {
            name: "pretrain-valid".into(),
            pairs: a_valid,
        },
    ];

    let runs = SEEDS
        .iter()
        .map(|&seed| {
            let pretrain_session = TrainSession {
                config: &config,
                data: &pretrain_data,
                eval_sets: &pretrain_evals,
                pad_id: pad,
                vocab_checksum: &checksum,
            };
            let theta_pre =
                run_training(&pretrain_plan(seed), &pretrain_session, Init::Random, None)
                    .expect("pretraining run")
                    .best_checkpoint
                    .params;

            let session = TrainSession {
                config: &config,
                data: &finetune_data,
                eval_sets: &finetune_evals,
                pad_id: pad,
                vocab_checksum: &checksum,
            };
            let standard = run_training(
                &finetune_plan(Strategy::StandardFinetune, seed),
                &session,
                Init::FromParams(theta_pre.clone()),
                None,
            )
            .expect("standard finetune run");
            let mix_review = run_training(
                &finetune_plan(Strategy::MixReview, seed),
                &session,
                Init::FromParams(theta_pre),
                None,
            )
            .expect("mix-review run");
            let scratch = run_training(
                &finetune_plan(Strategy::ScratchBaseline, seed),
                &session,
                Init::Random,
                None,
            )
            .expect("scratch baseline run");

            SeedRun {
                seed,
                standard,
                mix_review,
                scratch,
            }
        })
        .collect();

    ToyLab {
        config,
        bpe,
        vocab,
        a_lines,
        b_lines,
        b_valid,
        b_test,
        runs,
        build_seconds: start.elapsed().as_secs_f64(),
    }
}

/// The lab is built once per test binary; the first criterion that needs it
/// pays the training time.
pub fn toy_lab() -> &'static ToyLab {
    static LAB: OnceLock<ToyLab> = OnceLock::new();
    LAB.get_or_init(build_lab)
}

/// Pretrain-set perplexity trajectory of a finetune run: (value at finetune
/// start, value when training stopped).
pub fn pretrain_ppl_endpoints(outcome: &TrainOutcome) -> (f64, f64) {
    let first = &outcome.trace.first().expect("trace has rows").splits;
    let last = &outcome.trace.last().expect("trace has rows").splits;
    (
        first["pretrain-valid"],
        last["pretrain-valid"],
    )
}

/// "Passes for at least 2 of 3 seeds" helper: counts true flags.
pub fn seed_majority(flags: &[bool]) -> bool {
    flags.iter().filter(|&&ok| ok).count() >= 2
}
