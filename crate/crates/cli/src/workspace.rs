//! Output-directory plumbing shared by every command: the concurrency
//! lock, checksum helpers, encoded-pair caches, and the prepared-artifact
//! manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fgl_core::corpus::SequencePair;
use fgl_core::tokenizer::{BpeModel, Vocabulary};

/// Directory under the output root holding tokenizer artifacts and encoded
/// pair caches.
pub const PREPARED_DIR: &str = "prepared";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MERGES_FILE: &str = "merges.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Guards an output directory against concurrent commands. The lock file
/// records the owning pid and disappears when the guard drops.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(out_dir: &Path) -> Result<LockGuard> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
        let path = out_dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = std::fs::read_to_string(&path).unwrap_or_default();
                bail!(
                    "output directory {} is locked by another command (pid {}); \
                     remove {} if that process is gone",
                    out_dir.display(),
                    owner.trim(),
                    path.display()
                );
            }
            Err(e) => {
                Err(e).with_context(|| format!("cannot create lock file {}", path.display()))
            }
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Records what `fgl prepare` consumed and produced, so a rerun can prove
/// the artifacts are current and skip the rebuild.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Settings that shape the artifacts.
    pub num_merges: usize,
    pub max_context_tokens: usize,
    /// Config key → (source path, content checksum).
    pub inputs: BTreeMap<String, ManifestInput>,
    /// Artifact file name → content checksum.
    pub outputs: BTreeMap<String, String>,
    /// Checksum of the built vocabulary, echoed into checkpoints.
    pub vocab_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestInput {
    pub path: String,
    pub sha256: String,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("cannot parse {}", path.display()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }

    /// True when every recorded input still checksums the same and every
    /// recorded output is present and unmodified.
    pub fn is_current(&self, dir: &Path) -> bool {
        let inputs_match = self.inputs.values().all(|input| {
            sha256_file(Path::new(&input.path)).is_ok_and(|sum| sum == input.sha256)
        });
        let outputs_match = self
            .outputs
            .iter()
            .all(|(name, sum)| sha256_file(&dir.join(name)).is_ok_and(|s| s == *sum));
        inputs_match && outputs_match
    }
}

/// Tokenizer artifacts loaded back from a prepared directory.
pub struct Prepared {
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
    pub manifest: Manifest,
}

impl Prepared {
    pub fn load(out_dir: &Path) -> Result<Prepared> {
        let dir = out_dir.join(PREPARED_DIR);
        if !dir.join(MANIFEST_FILE).exists() {
            bail!(
                "no prepared artifacts under {} (run `fgl prepare` first)",
                dir.display()
            );
        }
        let manifest = Manifest::load(&dir)?;
        let bpe = BpeModel::load(&dir.join(MERGES_FILE))?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        if vocab.checksum() != manifest.vocab_checksum {
            bail!(
                "vocabulary under {} does not match its manifest; rerun `fgl prepare`",
                dir.display()
            );
        }
        Ok(Prepared {
            bpe,
            vocab,
            manifest,
        })
    }

    pub fn codec(&self) -> fgl_core::tokenizer::Codec<'_> {
        fgl_core::tokenizer::Codec {
            bpe: &self.bpe,
            vocab: &self.vocab,
        }
    }

    /// Reads one encoded split cache (`pairs-<split>.jsonl`).
    pub fn pairs(&self, out_dir: &Path, split: &str) -> Result<Vec<SequencePair>> {
        let path = pair_cache_path(out_dir, split);
        if !path.exists() {
            bail!(
                "no encoded cache for split {split:?} at {} \
                 (configure the corpus and rerun `fgl prepare`)",
                path.display()
            );
        }
        read_pairs(&path)
    }

    /// Reads cached raw sentences (`sentences-<split>.txt`), one per line.
    pub fn sentences(&self, out_dir: &Path, split: &str) -> Result<Vec<String>> {
        let path = sentence_cache_path(out_dir, split);
        if !path.exists() {
            bail!(
                "no sentence cache for split {split:?} at {} \
                 (configure the corpus and rerun `fgl prepare`)",
                path.display()
            );
        }
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        Ok(text.lines().map(str::to_string).collect())
    }
}

/// File-name labels for per-input artifacts: the file stem, disambiguated
/// by the parent directory (then a suffix) on collision. Checkpoints from
/// different runs are usually all called `best.ckpt`, so the run directory
/// is what tells them apart.
pub fn labels_for(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths.iter().map(|p| stem_of(p)).collect();
    let mut labels: Vec<String> = Vec::with_capacity(stems.len());
    for (i, stem) in stems.iter().enumerate() {
        let mut label = stem.clone();
        if stems.iter().filter(|s| *s == stem).count() > 1 {
            if let Some(parent) = paths[i].parent().and_then(|p| p.file_name()) {
                label = format!("{}-{label}", parent.to_string_lossy());
            }
        }
        while labels.contains(&label) {
            label.push_str("-next");
        }
        labels.push(label);
    }
    labels
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}

pub fn pair_cache_path(out_dir: &Path, split: &str) -> PathBuf {
    out_dir.join(PREPARED_DIR).join(format!("pairs-{split}.jsonl"))
}

pub fn sentence_cache_path(out_dir: &Path, split: &str) -> PathBuf {
    out_dir
        .join(PREPARED_DIR)
        .join(format!("sentences-{split}.txt"))
}

pub fn write_pairs(path: &Path, pairs: &[SequencePair]) -> Result<()> {
    let mut text = String::new();
    for pair in pairs {
        text.push_str(&serde_json::to_string(pair).expect("pairs serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_pairs(path: &Path) -> Result<Vec<SequencePair>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(line).with_context(|| {
            format!("cannot parse {} line {}", path.display(), i + 1)
        })?);
    }
    Ok(pairs)
}
