//! Character-level byte-pair subword tokenizer and batch collation.
//!
//! Text is pre-split into chunks that start at each whitespace character, so
//! a chunk looks like `" शब्द"` and merges never cross word boundaries.
//! Decoding concatenates token strings, which makes the round trip lossless
//! for any text whose characters were seen in training.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Label value excluded from the loss.
pub const IGNORE_INDEX: i64 = -100;
pub const DEFAULT_TASK_PREFIX: &str = "सारांश: ";
pub const MAX_SOURCE_LEN: usize = 1024;
pub const MAX_TARGET_LEN: usize = 20;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TokenizerError {
    #[error("vocab_size {requested} is below the minimum {minimum} (alphabet plus special tokens)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("unsupported tokenizer format version {0}")]
    Version(u32),
    #[error("malformed tokenizer file: {0}")]
    Format(String),
    #[error("cannot collate an empty list of examples")]
    EmptyBatch,
}

pub type Result<T, E = TokenizerError> = core::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub bos: u32,
    pub eos: u32,
}

impl Default for SpecialIds {
    fn default() -> Self {
        Self {
            pad: PAD_ID,
            unk: UNK_ID,
            bos: BOS_ID,
            eos: EOS_ID,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    special_ids: SpecialIds,
    task_prefix: String,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubwordTokenizer {
    special_ids: SpecialIds,
    task_prefix: String,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    vocab: BTreeMap<String, u32>,
    longest: usize,
}

/// Splits before every whitespace character.
fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() && i > start {
            out.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn count_pairs(words: &[(Vec<String>, u64)]) -> BTreeMap<(String, String), u64> {
    let mut counts = BTreeMap::new();
    for (symbols, freq) in words {
        for pair in symbols.windows(2) {
            *counts.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += freq;
        }
    }
    counts
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(core::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Learns merges until the vocabulary reaches `vocab_size` or no adjacent
/// pair is left. The most frequent pair wins; ties go to the
/// lexicographically smallest `(left, right)`. The task prefix is part of
/// the training text so its characters are always in the alphabet.
pub fn train_tokenizer<S: AsRef<str>>(
    texts: &[S],
    vocab_size: usize,
    task_prefix: &str,
) -> Result<SubwordTokenizer> {
    if texts.iter().all(|t| t.as_ref().is_empty()) {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut word_freq: BTreeMap<&str, u64> = BTreeMap::new();
    let mut alphabet: BTreeSet<char> = BTreeSet::new();
    for text in texts.iter().map(|t| t.as_ref()).chain(core::iter::once(task_prefix)) {
        alphabet.extend(text.chars());
        for c in chunks(text) {
            *word_freq.entry(c).or_insert(0) += 1;
        }
    }
    let minimum = SPECIAL_TOKENS.len() + alphabet.len();
    if vocab_size < minimum {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().map(|c| c.to_string()));
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(w, f)| (w.chars().map(|c| c.to_string()).collect(), f))
        .collect();
    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let counts = count_pairs(&words);
        // BTreeMap iterates pairs in lexicographic order, so keeping the
        // first maximum implements the tie-break.
        let mut best: Option<(&(String, String), u64)> = None;
        for (pair, &c) in &counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some(((left, right), _)) = best else { break };
        let (left, right) = (left.clone(), right.clone());
        for (symbols, _) in words.iter_mut() {
            apply_merge(symbols, &left, &right);
        }
        let merged = format!("{left}{right}");
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
        merges.push((left, right));
    }
    Ok(SubwordTokenizer::from_parts(
        SpecialIds::default(),
        String::from(task_prefix),
        tokens,
        merges,
    ))
}

impl SubwordTokenizer {
    fn from_parts(special_ids: SpecialIds, task_prefix: String, tokens: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let mut vocab = BTreeMap::new();
        let mut longest = 1;
        for (i, t) in tokens.iter().enumerate() {
            if i >= SPECIAL_TOKENS.len() {
                longest = longest.max(t.chars().count());
                vocab.insert(t.clone(), i as u32);
            }
        }
        Self {
            special_ids,
            task_prefix,
            tokens,
            merges,
            vocab,
            longest,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn special_ids(&self) -> SpecialIds {
        self.special_ids
    }

    pub fn task_prefix(&self) -> &str {
        &self.task_prefix
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-special token string → id.
    pub fn vocab(&self) -> &BTreeMap<String, u32> {
        &self.vocab
    }

    /// Subword ids without special tokens, using greedy longest match
    /// against the vocabulary. Unknown characters become the unknown id.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in chunks(text) {
            let chars: Vec<(usize, char)> = chunk.char_indices().collect();
            let mut i = 0;
            while i < chars.len() {
                let max = self.longest.min(chars.len() - i);
                let mut matched = None;
                for len in (1..=max).rev() {
                    let start = chars[i].0;
                    let end = chars.get(i + len).map_or(chunk.len(), |c| c.0);
                    if let Some(&id) = self.vocab.get(&chunk[start..end]) {
                        matched = Some((id, len));
                        break;
                    }
                }
                match matched {
                    Some((id, len)) => {
                        out.push(id);
                        i += len;
                    }
                    None => {
                        out.push(self.special_ids.unk);
                        i += 1;
                    }
                }
            }
        }
        out
    }

    /// `[begin, …tokens…, end]`, truncated from the right to `max_len`. The
    /// task prefix is prepended to the text first when `add_prefix` is set.
    pub fn encode(&self, text: &str, max_len: usize, add_prefix: bool) -> Vec<u32> {
        let body = if add_prefix {
            let mut s = self.task_prefix.clone();
            s.push_str(text);
            self.tokenize(&s)
        } else {
            self.tokenize(text)
        };
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(self.special_ids.bos);
        ids.extend(body);
        ids.push(self.special_ids.eos);
        ids.truncate(max_len);
        ids
    }

    /// Target-side encoding `[…tokens…, end]` truncated to `max_len`. The
    /// begin token is supplied by the decoder shift, and the limit counts
    /// the end token.
    pub fn encode_target(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = self.tokenize(text);
        ids.push(self.special_ids.eos);
        ids.truncate(max_len);
        ids
    }

    pub fn encode_example(&self, body: &str, headline: &str, max_source: usize, max_target: usize) -> EncodedExample {
        EncodedExample {
            input_ids: self.encode(body, max_source, true),
            label_ids: self.encode_target(headline, max_target),
        }
    }

    /// Concatenates token strings, skipping pad/begin/end. Unknown ids
    /// render as U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        let s = self.special_ids;
        let mut out = String::new();
        for &id in ids {
            if id == s.pad || id == s.bos || id == s.eos {
                continue;
            }
            if id == s.unk {
                out.push('\u{FFFD}');
                continue;
            }
            if let Some(t) = self.tokens.get(id as usize) {
                out.push_str(t);
            }
        }
        out
    }

    /// Stable JSON form; identical tokenizers serialize to identical bytes.
    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            version: FORMAT_VERSION,
            special_ids: self.special_ids,
            task_prefix: self.task_prefix.clone(),
            tokens: self.tokens.clone(),
            merges: self.merges.clone(),
        };
        serde_json::to_string_pretty(&file).expect("tokenizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct VersionProbe {
            version: u32,
        }
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        if probe.version != FORMAT_VERSION {
            return Err(TokenizerError::Version(probe.version));
        }
        let file: TokenizerFile = serde_json::from_str(text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        let n = file.tokens.len() as u32;
        let s = file.special_ids;
        let ids = [s.pad, s.unk, s.bos, s.eos];
        if ids.iter().any(|&i| i >= n) || (1..4).any(|i| ids[..i].contains(&ids[i])) {
            return Err(TokenizerError::Format(String::from("special ids must be distinct and in range")));
        }
        Ok(Self::from_parts(file.special_ids, file.task_prefix, file.tokens, file.merges))
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub input_ids: Vec<u32>,
    pub label_ids: Vec<u32>,
}

/// Dynamically padded batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub input_ids: Vec<Vec<u32>>,
    pub attention_mask: Vec<Vec<u8>>,
    pub labels: Vec<Vec<i64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn source_width(&self) -> usize {
        self.input_ids.first().map_or(0, |r| r.len())
    }

    pub fn target_width(&self) -> usize {
        self.labels.first().map_or(0, |r| r.len())
    }
}

/// Pads sources with `pad_id` and labels with `ignore` to the longest row of
/// this batch.
pub fn collate(examples: &[EncodedExample], pad_id: u32, ignore: i64) -> Result<Batch> {
    if examples.is_empty() {
        return Err(TokenizerError::EmptyBatch);
    }
    let src = examples.iter().map(|e| e.input_ids.len()).max().unwrap_or(0);
    let tgt = examples.iter().map(|e| e.label_ids.len()).max().unwrap_or(0);
    let mut batch = Batch {
        input_ids: Vec::with_capacity(examples.len()),
        attention_mask: Vec::with_capacity(examples.len()),
        labels: Vec::with_capacity(examples.len()),
    };
    for e in examples {
        let mut ids = e.input_ids.clone();
        let mut mask = vec![1u8; ids.len()];
        ids.resize(src, pad_id);
        mask.resize(src, 0);
        let mut labels: Vec<i64> = e.label_ids.iter().map(|&l| l as i64).collect();
        labels.resize(tgt, ignore);
        batch.input_ids.push(ids);
        batch.attention_mask.push(mask);
        batch.labels.push(labels);
    }
    Ok(batch)
}
