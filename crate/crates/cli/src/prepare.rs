//! `fgl prepare`: learn the tokenizer and encode every configured corpus
//! into pair caches, recording checksums so unchanged inputs make a rerun
//! a no-op.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use fgl_core::corpus::{
    load_dialogue_corpus, load_document_corpus, make_dialogue_pairs, make_ns_pairs, Origin,
    SequencePair,
};
use fgl_core::tokenizer::{build_vocabulary, learn_bpe};

use crate::config::{Overrides, RunConfig};
use crate::usage;
use crate::workspace::{
    pair_cache_path, sentence_cache_path, sha256_file, LockGuard, Manifest, ManifestInput,
    Prepared, MERGES_FILE, PREPARED_DIR, VOCAB_FILE,
};

/// One configured corpus file and how to interpret it.
struct Source {
    /// Config key, e.g. `corpus.dialogue_train`.
    key: &'static str,
    /// Split name used in cache file names, e.g. `dialogue-train`.
    split: &'static str,
    path: PathBuf,
    kind: Kind,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Documents,
    Dialogues,
}

fn sources(cfg: &RunConfig) -> Vec<Source> {
    let c = &cfg.corpus;
    let entries: [(&'static str, &'static str, &Option<PathBuf>, Kind); 5] = [
        ("corpus.pretrain_train", "pretrain-train", &c.pretrain_train, Kind::Documents),
        ("corpus.pretrain_valid", "pretrain-valid", &c.pretrain_valid, Kind::Documents),
        ("corpus.dialogue_train", "dialogue-train", &c.dialogue_train, Kind::Dialogues),
        ("corpus.dialogue_valid", "dialogue-valid", &c.dialogue_valid, Kind::Dialogues),
        ("corpus.dialogue_test", "dialogue-test", &c.dialogue_test, Kind::Dialogues),
    ];
    entries
        .into_iter()
        .filter_map(|(key, split, path, kind)| {
            path.as_ref().map(|p| Source {
                key,
                split,
                path: p.clone(),
                kind,
            })
        })
        .collect()
}

pub fn run(overrides: &Overrides) -> Result<()> {
    let cfg = RunConfig::resolve(overrides)?;
    let sources = sources(&cfg);
    if sources.is_empty() {
        usage!("no corpora configured; set paths under [corpus] in the config file");
    }
    let _lock = LockGuard::acquire(cfg.out_dir())?;
    let dir = cfg.out_dir().join(PREPARED_DIR);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create {}", dir.display()))?;

    let mut inputs = BTreeMap::new();
    for source in &sources {
        inputs.insert(
            source.key.to_string(),
            ManifestInput {
                path: source.path.display().to_string(),
                sha256: sha256_file(&source.path)
                    .with_context(|| format!("missing corpus file for {}", source.key))?,
            },
        );
    }

    let num_merges = cfg.tokenizer.num_merges.expect("resolved");
    let max_context = cfg.max_context_tokens();
    if let Ok(manifest) = Manifest::load(&dir) {
        if manifest.num_merges == num_merges
            && manifest.max_context_tokens == max_context
            && manifest.inputs == inputs
            && manifest.is_current(&dir)
        {
            println!("prepared artifacts in {} are up to date", dir.display());
            return Ok(());
        }
    }

    // Sentence lists per split, in corpus order. Documents keep their
    // grouping so next-sentence contexts never cross a document boundary.
    let mut documents: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    let mut dialogues: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for source in &sources {
        match source.kind {
            Kind::Documents => {
                let corpus = load_document_corpus(&source.path, Origin::Pretrain)?;
                documents.insert(source.split, corpus.documents);
            }
            Kind::Dialogues => {
                let corpus = load_dialogue_corpus(&source.path)?;
                dialogues.insert(source.split, corpus.dialogues);
            }
        }
    }

    // The tokenizer sees every configured split (held-out text included) so
    // later evaluation never hits out-of-vocabulary tokens.
    let mut lines: Vec<&String> = Vec::new();
    for group in documents.values().chain(dialogues.values()) {
        for unit in group {
            lines.extend(unit.iter());
        }
    }
    let bpe = learn_bpe(&lines, num_merges)?;
    let vocab = build_vocabulary(&bpe, &lines)?;
    bpe.save(&dir.join(MERGES_FILE))?;
    vocab.save(&dir.join(VOCAB_FILE))?;

    let codec = fgl_core::tokenizer::Codec {
        bpe: &bpe,
        vocab: &vocab,
    };
    let mut outputs = BTreeMap::new();
    record(&mut outputs, &dir, MERGES_FILE)?;
    record(&mut outputs, &dir, VOCAB_FILE)?;
    for (split, docs) in &documents {
        let mut pairs: Vec<SequencePair> = Vec::new();
        for doc in docs {
            pairs.extend(make_ns_pairs(doc, &codec, max_context, Origin::Pretrain));
        }
        write_split(&mut outputs, cfg.out_dir(), split, &pairs)?;
        // Flat sentence cache for masked-span pretraining, which re-masks
        // at run time.
        let sentences: Vec<&str> = docs.iter().flatten().map(String::as_str).collect();
        let path = sentence_cache_path(cfg.out_dir(), split);
        std::fs::write(&path, sentences.join("\n") + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        record(&mut outputs, &dir, &file_name(&path))?;
    }
    for (split, convos) in &dialogues {
        let mut pairs: Vec<SequencePair> = Vec::new();
        for utterances in convos {
            pairs.extend(make_dialogue_pairs(utterances, &codec, max_context));
        }
        write_split(&mut outputs, cfg.out_dir(), split, &pairs)?;
    }

    let manifest = Manifest {
        num_merges,
        max_context_tokens: max_context,
        inputs,
        outputs,
        vocab_checksum: vocab.checksum(),
    };
    manifest.save(&dir)?;
    cfg.persist(&dir)?;
    // Loading back is cheap and proves the artifacts are self-consistent;
    // the summary comes from the reloaded copy, not the one in memory.
    let prepared = Prepared::load(cfg.out_dir())?;

    println!(
        "prepared {} merges, {} tokens, {} splits into {}",
        prepared.bpe.merge_count(),
        prepared.vocab.size(),
        documents.len() + dialogues.len(),
        dir.display()
    );
    println!(
        "manifest tracks {} inputs and {} artifacts",
        prepared.manifest.inputs.len(),
        prepared.manifest.outputs.len()
    );
    Ok(())
}

fn write_split(
    outputs: &mut BTreeMap<String, String>,
    out_dir: &Path,
    split: &str,
    pairs: &[SequencePair],
) -> Result<()> {
    let path = pair_cache_path(out_dir, split);
    crate::workspace::write_pairs(&path, pairs)?;
    let dir = path.parent().expect("cache paths have parents").to_owned();
    record(outputs, &dir, &file_name(&path))
}

fn record(outputs: &mut BTreeMap<String, String>, dir: &Path, name: &str) -> Result<()> {
    outputs.insert(name.to_string(), sha256_file(&dir.join(name))?);
    Ok(())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .expect("cache paths have file names")
        .to_string_lossy()
        .into_owned()
}
