//! Byte-pair-encoding subword tokenizer.
//!
//! Merges are learned from whitespace-tokenized text with an end-of-word
//! marker attached to each word's final character. Encoding applies the
//! learned merges by priority; decoding strips markers and rejoins words
//! with single spaces, so `decode(encode(s))` recovers any
//! whitespace-normalized `s` whose symbols are in the vocabulary.
//!
//! Six reserved tokens (`<BOS>`, `<EOS>`, `<eou>`, `<MASK>`, `<PAD>`,
//! `<UNK>`) bypass segmentation entirely: they encode to fixed ids when
//! they appear as standalone words and render back as their literals.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Marker glued onto the final character of every word before merging, so
/// "low" segments differently word-finally ("low</w>") than as a prefix.
pub const END_OF_WORD: &str = "</w>";

/// The six reserved tokens, in id order (`Bos` = 0 … `Unk` = 5 in any
/// vocabulary built by [`build_vocabulary`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    /// Begin-of-sequence, prepended to every decoder target.
    Bos,
    /// End-of-sequence, appended to every decoder target.
    Eos,
    /// End-of-utterance separator between dialogue turns.
    Eou,
    /// Mask placeholder for span-masked pretraining inputs.
    Mask,
    /// Padding for batched variable-length sequences.
    Pad,
    /// Fallback for symbols missing from the vocabulary.
    Unk,
}

impl Special {
    pub const ALL: [Special; 6] = [
        Special::Bos,
        Special::Eos,
        Special::Eou,
        Special::Mask,
        Special::Pad,
        Special::Unk,
    ];

    /// The literal string form used in corpora and rendered by decode.
    pub fn literal(self) -> &'static str {
        match self {
            Special::Bos => "<BOS>",
            Special::Eos => "<EOS>",
            Special::Eou => "<eou>",
            Special::Mask => "<MASK>",
            Special::Pad => "<PAD>",
            Special::Unk => "<UNK>",
        }
    }

    pub fn from_literal(s: &str) -> Option<Special> {
        Special::ALL.into_iter().find(|sp| sp.literal() == s)
    }
}

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid token id {0}")]
    InvalidTokenId(u32),
    #[error("malformed merge on line {line}: {text:?}")]
    MalformedMerge { line: usize, text: String },
    #[error("vocabulary is missing special token {0}")]
    MissingSpecial(&'static str),
    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> TokenizerError {
    TokenizerError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// NFC-normalizes a line and yields its whitespace-separated words.
fn words_of(line: &str) -> Vec<String> {
    let normalized: String = line.nfc().collect();
    normalized
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Splits a word into initial symbols: one per character, with
/// [`END_OF_WORD`] attached to the last.
fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut symbols = Vec::with_capacity(chars.len());
    for (i, c) in chars.iter().enumerate() {
        if i + 1 == chars.len() {
            symbols.push(format!("{c}{END_OF_WORD}"));
        } else {
            symbols.push(c.to_string());
        }
    }
    symbols
}

/// An ordered list of learned merges. Applying them by priority is the
/// whole segmentation algorithm; the model carries no other state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, pair)| (pair.clone(), i))
            .collect();
        Self { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    pub fn end_of_word_marker(&self) -> &'static str {
        END_OF_WORD
    }

    /// Segments one word by repeatedly applying the highest-priority merge
    /// present among adjacent symbol pairs (equivalent to replaying the
    /// merge list in order).
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = initial_symbols(word);
        while symbols.len() >= 2 {
            let mut best: Option<(usize, (String, String))> = None;
            for window in symbols.windows(2) {
                let pair = (window[0].clone(), window[1].clone());
                if let Some(&rank) = self.ranks.get(&pair) {
                    if best.as_ref().is_none_or(|(r, _)| rank < *r) {
                        best = Some((rank, pair));
                    }
                }
            }
            let Some((_, (left, right))) = best else {
                break;
            };
            symbols = merge_adjacent(&symbols, &left, &right);
        }
        symbols
    }

    /// Writes one merge per line as "left right"; line order is priority.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut out = String::new();
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let Some((l, r)) = line.split_once(' ') else {
                return Err(TokenizerError::MalformedMerge {
                    line: i + 1,
                    text: line.to_owned(),
                });
            };
            if l.is_empty() || r.is_empty() || r.contains(' ') {
                return Err(TokenizerError::MalformedMerge {
                    line: i + 1,
                    text: line.to_owned(),
                });
            }
            merges.push((l.to_owned(), r.to_owned()));
        }
        Ok(Self::from_merges(merges))
    }
}

/// Replaces every non-overlapping adjacent `(left, right)` with their
/// concatenation, scanning left to right.
fn merge_adjacent(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns up to `num_merges` merges from whitespace-tokenized lines.
///
/// Each round counts adjacent symbol pairs across all words (weighted by
/// word frequency, counting overlaps) and merges the most frequent pair;
/// count ties go to the lexicographically greatest `(left, right)`.
/// Learning stops early once no pair occurs at least twice. Words equal to
/// a reserved-token literal are excluded, and no merge may spell one.
pub fn learn_bpe<S: AsRef<str>>(
    corpus: &[S],
    num_merges: usize,
) -> Result<BpeModel, TokenizerError> {
    let mut word_freq: HashMap<String, u64> = HashMap::new();
    for line in corpus {
        for word in words_of(line.as_ref()) {
            if Special::from_literal(&word).is_some() {
                continue;
            }
            *word_freq.entry(word).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    // Intern symbols so the hot loop hashes u32 pairs, not strings.
    let mut symbol_names: Vec<String> = Vec::new();
    let mut symbol_ids: HashMap<String, u32> = HashMap::new();
    let intern = |name: String,
                      names: &mut Vec<String>,
                      ids: &mut HashMap<String, u32>|
     -> u32 {
        if let Some(&id) = ids.get(&name) {
            return id;
        }
        let id = names.len() as u32;
        names.push(name.clone());
        ids.insert(name, id);
        id
    };

    let mut words: Vec<(Vec<u32>, u64)> = word_freq
        .iter()
        .map(|(word, &freq)| {
            let syms = initial_symbols(word)
                .into_iter()
                .map(|s| intern(s, &mut symbol_names, &mut symbol_ids))
                .collect();
            (syms, freq)
        })
        .collect();

    let specials: Vec<&str> = Special::ALL.iter().map(|s| s.literal()).collect();
    let mut merges: Vec<(String, String)> = Vec::new();

    for _ in 0..num_merges {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, freq) in &words {
            for window in syms.windows(2) {
                *pair_counts.entry((window[0], window[1])).or_insert(0) += freq;
            }
        }

        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &count) in &pair_counts {
            if count < 2 {
                continue;
            }
            let spelled = format!("{}{}", symbol_names[pair.0 as usize], symbol_names[pair.1 as usize]);
            if specials.contains(&spelled.as_str()) {
                continue;
            }
            let better = match best {
                None => true,
                Some((cur, cur_count)) => {
                    count > cur_count
                        || (count == cur_count && {
                            let cand = (
                                &symbol_names[pair.0 as usize],
                                &symbol_names[pair.1 as usize],
                            );
                            let held = (
                                &symbol_names[cur.0 as usize],
                                &symbol_names[cur.1 as usize],
                            );
                            cand > held
                        })
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some(((l, r), _)) = best else {
            break;
        };

        let left = symbol_names[l as usize].clone();
        let right = symbol_names[r as usize].clone();
        let merged = intern(
            format!("{left}{right}"),
            &mut symbol_names,
            &mut symbol_ids,
        );
        for (syms, _) in &mut words {
            let mut i = 0;
            let mut out = Vec::with_capacity(syms.len());
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
        merges.push((left, right));
    }

    Ok(BpeModel::from_merges(merges))
}

/// Token-string ↔ id bijection with the six reserved tokens resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    special_ids: [u32; 6],
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(TokenizerError::DuplicateToken(tok.clone()));
            }
        }
        let mut special_ids = [0u32; 6];
        for (slot, sp) in special_ids.iter_mut().zip(Special::ALL) {
            *slot = *ids
                .get(sp.literal())
                .ok_or(TokenizerError::MissingSpecial(sp.literal()))?;
        }
        Ok(Self {
            tokens,
            ids,
            special_ids,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str, TokenizerError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(TokenizerError::InvalidTokenId(id))
    }

    pub fn special(&self, s: Special) -> u32 {
        self.special_ids[Special::ALL.iter().position(|&x| x == s).unwrap()]
    }

    /// True if `id` is one of the six reserved tokens.
    pub fn is_special(&self, id: u32) -> bool {
        self.special_ids.contains(&id)
    }

    /// Writes one token per line; the id is the zero-based line number.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.serialize()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    fn serialize(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the saved form, hex-encoded; lets checkpoints detect a
    /// vocabulary swap.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.serialize().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds the vocabulary for a segmented corpus: the six reserved tokens
/// first (ids 0–5), then every symbol the corpus segments into, ordered by
/// frequency descending with ties lexicographic.
pub fn build_vocabulary<S: AsRef<str>>(
    bpe: &BpeModel,
    corpus: &[S],
) -> Result<Vocabulary, TokenizerError> {
    let mut word_freq: HashMap<String, u64> = HashMap::new();
    for line in corpus {
        for word in words_of(line.as_ref()) {
            if Special::from_literal(&word).is_some() {
                continue;
            }
            *word_freq.entry(word).or_insert(0) += 1;
        }
    }

    let mut symbol_freq: HashMap<String, u64> = HashMap::new();
    for (word, freq) in &word_freq {
        for sym in bpe.segment_word(word) {
            *symbol_freq.entry(sym).or_insert(0) += freq;
        }
    }

    let mut ranked: Vec<(String, u64)> = symbol_freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = Special::ALL
        .iter()
        .map(|s| s.literal().to_owned())
        .collect();
    tokens.extend(ranked.into_iter().map(|(sym, _)| sym));
    Vocabulary::from_tokens(tokens)
}

/// Encodes text to ids: reserved-token literals pass through unsegmented,
/// everything else is BPE-segmented, and out-of-vocabulary symbols fall
/// back to `<UNK>`.
pub fn encode(bpe: &BpeModel, vocab: &Vocabulary, text: &str) -> Vec<u32> {
    let unk = vocab.special(Special::Unk);
    let mut ids = Vec::new();
    for word in words_of(text) {
        if let Some(sp) = Special::from_literal(&word) {
            ids.push(vocab.special(sp));
            continue;
        }
        for sym in bpe.segment_word(&word) {
            ids.push(vocab.id(&sym).unwrap_or(unk));
        }
    }
    ids
}

/// Decodes ids back to text: end-of-word markers close a word, words join
/// with single spaces, and reserved tokens render as their literals.
pub fn decode(
    bpe: &BpeModel,
    vocab: &Vocabulary,
    ids: &[u32],
) -> Result<String, TokenizerError> {
    let marker = bpe.end_of_word_marker();
    let mut parts: Vec<String> = Vec::new();
    let mut partial = String::new();
    for &id in ids {
        let token = vocab.token(id)?;
        if vocab.is_special(id) {
            if !partial.is_empty() {
                parts.push(std::mem::take(&mut partial));
            }
            parts.push(token.to_owned());
        } else if let Some(stem) = token.strip_suffix(marker) {
            partial.push_str(stem);
            parts.push(std::mem::take(&mut partial));
        } else {
            partial.push_str(token);
        }
    }
    if !partial.is_empty() {
        parts.push(partial);
    }
    Ok(parts.join(" "))
}

/// Convenience bundle of a merge model plus its vocabulary, for call sites
/// that encode and decode together.
#[derive(Clone, Copy)]
pub struct Codec<'a> {
    pub bpe: &'a BpeModel,
    pub vocab: &'a Vocabulary,
}

impl Codec<'_> {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        encode(self.bpe, self.vocab, text)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        decode(self.bpe, self.vocab, ids)
    }

    pub fn special(&self, s: Special) -> u32 {
        self.vocab.special(s)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn learns_merges_by_count_then_reverse_lexicographic() {
        // "aaab" twice: (a,a) counts 4 with overlaps, so it merges first;
        // the second round ties (aa,a) with (a,b</w>) at 2 and the greater
        // pair wins.
        let model = learn_bpe(&["aaab aaab"], 2).unwrap();
        assert_eq!(
            model.merges(),
            &[
                ("a".to_owned(), "a".to_owned()),
                ("aa".to_owned(), "a".to_owned())
            ]
        );
    }

    #[test]
    fn single_character_word_yields_no_merges() {
        let model = learn_bpe(&["x"], 10).unwrap();
        assert_eq!(model.merge_count(), 0);
    }

    #[test]
    fn learning_is_deterministic() {
        let corpus = ["the cat sat on the mat", "the cat ran", "a mat sat"];
        let a = learn_bpe(&corpus, 50).unwrap();
        let b = learn_bpe(&corpus, 50).unwrap();
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn merges_stop_when_no_pair_repeats() {
        let model = learn_bpe(&["abc def"], 100).unwrap();
        assert!(model.merge_count() < 100);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            learn_bpe::<&str>(&[], 5),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            learn_bpe(&["   ", ""], 5),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn no_merge_spells_a_reserved_token() {
        // A word that would happily merge into "<eou>" if unguarded.
        let corpus = ["<eou>x <eou>x <eou>x <eou>x"];
        let model = learn_bpe(&corpus, 50).unwrap();
        for (l, r) in model.merges() {
            let spelled = format!("{l}{r}");
            assert!(Special::from_literal(&spelled).is_none(), "{spelled}");
        }
    }

    #[test]
    fn vocabulary_orders_specials_then_frequency_then_lexicographic() {
        let corpus = ["b b a a c"];
        let model = learn_bpe(&corpus, 1).unwrap_or_else(|_| BpeModel::from_merges(vec![]));
        let vocab = build_vocabulary(&model, &corpus).unwrap();
        for (i, sp) in Special::ALL.into_iter().enumerate() {
            assert_eq!(vocab.special(sp), i as u32);
            assert_eq!(vocab.token(i as u32).unwrap(), sp.literal());
        }
        // a</w> and b</w> tie at frequency 2; lexicographic order breaks it.
        assert_eq!(vocab.token(6).unwrap(), "a</w>");
        assert_eq!(vocab.token(7).unwrap(), "b</w>");
        assert_eq!(vocab.token(8).unwrap(), "c</w>");
        assert_eq!(vocab.size(), 9);
    }

    #[test]
    fn vocabulary_with_zero_merges_lists_marked_characters() {
        let model = BpeModel::from_merges(vec![]);
        let vocab = build_vocabulary(&model, &["a b"]).unwrap();
        assert_eq!(vocab.size(), 8);
        assert_eq!(vocab.id("a</w>"), Some(6));
        assert_eq!(vocab.id("b</w>"), Some(7));
    }

    #[test]
    fn encode_handles_empty_and_special_passthrough() {
        // "hi" twice so (h, i</w>) reaches the count-2 merge threshold.
        let model = learn_bpe(&["hi there hi"], 5).unwrap();
        let vocab = build_vocabulary(&model, &["hi there hi"]).unwrap();
        assert!(encode(&model, &vocab, "").is_empty());
        assert_eq!(
            encode(&model, &vocab, "<eou>"),
            vec![vocab.special(Special::Eou)]
        );
        assert_eq!(
            encode(&model, &vocab, "hi <eou> hi"),
            {
                let hi = vocab.id("hi</w>").unwrap();
                vec![hi, vocab.special(Special::Eou), hi]
            }
        );
    }

    #[test]
    fn unknown_symbols_degrade_to_unk() {
        let model = learn_bpe(&["aa aa"], 1).unwrap();
        let vocab = build_vocabulary(&model, &["aa aa"]).unwrap();
        let ids = encode(&model, &vocab, "zz");
        assert!(ids.iter().all(|&id| id == vocab.special(Special::Unk)));
    }

    #[test]
    fn decode_renders_specials_and_rejects_bad_ids() {
        let model = learn_bpe(&["hi"], 1).unwrap();
        let vocab = build_vocabulary(&model, &["hi"]).unwrap();
        assert_eq!(decode(&model, &vocab, &[]).unwrap(), "");
        let bos = vocab.special(Special::Bos);
        let eos = vocab.special(Special::Eos);
        assert_eq!(decode(&model, &vocab, &[bos, eos]).unwrap(), "<BOS> <EOS>");
        let bad = vocab.size() as u32;
        assert!(matches!(
            decode(&model, &vocab, &[bad]),
            Err(TokenizerError::InvalidTokenId(id)) if id == bad
        ));
    }

    #[test]
    fn merge_and_vocabulary_files_round_trip_bit_exactly() {
        let corpus = ["the quick brown fox", "the slow brown dog", "quick quick"];
        let model = learn_bpe(&corpus, 30).unwrap();
        let vocab = build_vocabulary(&model, &corpus).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let merge_path = dir.path().join("merges.txt");
        let vocab_path = dir.path().join("vocab.txt");
        model.save(&merge_path).unwrap();
        vocab.save(&vocab_path).unwrap();

        let model2 = BpeModel::load(&merge_path).unwrap();
        let vocab2 = Vocabulary::load(&vocab_path).unwrap();
        assert_eq!(model, model2);
        assert_eq!(vocab, vocab2);
        assert_eq!(vocab.checksum(), vocab2.checksum());

        let merge_path2 = dir.path().join("merges2.txt");
        let vocab_path2 = dir.path().join("vocab2.txt");
        model2.save(&merge_path2).unwrap();
        vocab2.save(&vocab_path2).unwrap();
        assert_eq!(
            fs::read(&merge_path).unwrap(),
            fs::read(&merge_path2).unwrap()
        );
        assert_eq!(
            fs::read(&vocab_path).unwrap(),
            fs::read(&vocab_path2).unwrap()
        );
    }

    #[test]
    fn malformed_merge_file_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merges.txt");
        fs::write(&path, "a b\nbroken\n").unwrap();
        assert!(matches!(
            BpeModel::load(&path),
            Err(TokenizerError::MalformedMerge { line: 2, .. })
        ));
    }

    #[test]
    fn vocabulary_file_without_specials_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        fs::write(&path, "a</w>\nb</w>\n").unwrap();
        assert!(matches!(
            Vocabulary::load(&path),
            Err(TokenizerError::MissingSpecial("<BOS>"))
        ));
    }

    proptest! {
        /// decode ∘ encode is the identity on whitespace-normalized text
        /// drawn from the corpus the vocabulary was built on.
        #[test]
        fn round_trip_recovers_normalized_lines(
            words in proptest::collection::vec("[a-e]{1,6}", 1..12),
            num_merges in 0usize..40,
        ) {
            let line = words.join(" ");
            let corpus = [line.clone()];
            let model = match learn_bpe(&corpus, num_merges.max(1)) {
                Ok(m) => m,
                Err(_) => return Ok(()),
            };
            let vocab = build_vocabulary(&model, &corpus).unwrap();
            let ids = encode(&model, &vocab, &line);
            prop_assert_eq!(decode(&model, &vocab, &ids).unwrap(), line);
        }

        /// Every merged symbol is the concatenation of its two parts, and
        /// merge lists never exceed the requested count.
        #[test]
        fn merge_lists_are_well_formed(
            words in proptest::collection::vec("[a-d]{1,5}", 1..20),
            num_merges in 1usize..30,
        ) {
            let line = words.join(" ");
            let model = match learn_bpe(&[line], num_merges) {
                Ok(m) => m,
                Err(_) => return Ok(()),
            };
            prop_assert!(model.merge_count() <= num_merges);
            for (i, (l, r)) in model.merges().iter().enumerate() {
                // Each side of a later merge must be buildable: a single
                // marked/unmarked character or the output of an earlier merge.
                let earlier: Vec<String> = model.merges()[..i]
                    .iter()
                    .map(|(a, b)| format!("{a}{b}"))
                    .collect();
                for side in [l, r] {
                    let is_atomic = side.chars().count() == 1
                        || (side.ends_with(END_OF_WORD)
                            && side.trim_end_matches(END_OF_WORD).chars().count() == 1);
                    prop_assert!(is_atomic || earlier.contains(side), "side {side:?}");
                }
            }
        }
    }
}
