//! Article records, Devanagari-only normalization, ingestion of
//! line-delimited corpus files, category statistics and seeded splits.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The ten portal categories, largest first.
pub const CATEGORIES: [&str; 10] = [
    "News",
    "Sports",
    "Others(Mix)",
    "Opinion",
    "Entertainment",
    "Feature",
    "Diaspora",
    "World",
    "Education",
    "Blog",
];

pub const DEFAULT_PUNCTUATION: &str = ",?!\"'\u{201C}\u{201D}\u{2018}\u{2019}";
pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.20, 0.10];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleRecord {
    pub id: String,
    pub source: String,
    pub category: String,
    pub headline: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    /// Characters kept in addition to the Devanagari block and whitespace.
    pub punctuation: String,
    /// Abort on the first malformed line instead of counting it.
    pub strict: bool,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            punctuation: String::from(DEFAULT_PUNCTUATION),
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed record on line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid cleaning config: {0}")]
    Config(String),
    #[error("invalid split ratios {0:?}: must be positive and sum to 1")]
    Ratios([f64; 3]),
}

pub type Result<T, E = CorpusError> = core::result::Result<T, E>;

impl CleanConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self
            .punctuation
            .chars()
            .find(|c| matches!(c, '<' | '>') || c.is_alphanumeric() && !is_devanagari(*c))
        {
            return Err(CorpusError::Config(format!("punctuation may not contain {c:?}")));
        }
        Ok(())
    }

    fn allows(&self, c: char) -> bool {
        is_devanagari(c) || c.is_whitespace() || self.punctuation.contains(c)
    }
}

pub fn is_devanagari(c: char) -> bool {
    ('\u{0900}'..='\u{097F}').contains(&c)
}

fn strip_markup(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(open) = rest.find('<') {
        out.push_str(&rest[..open]);
        match rest[open..].find('>') {
            Some(close) => {
                out.push(' ');
                rest = &rest[open + close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Strips `<…>` markup, drops characters outside the whitelist and collapses
/// whitespace runs to single spaces.
pub fn clean_text_with(raw: &str, config: &CleanConfig) -> String {
    let stripped = strip_markup(raw);
    let mut out = String::with_capacity(stripped.len());
    let mut pending_space = false;
    for c in stripped.chars().filter(|&c| config.allows(c)) {
        if c.is_whitespace() {
            pending_space = true;
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.push(c);
    }
    out
}

pub fn clean_text(raw: &str) -> String {
    clean_text_with(raw, &CleanConfig::default())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub read: usize,
    pub kept: usize,
    pub dropped_empty: usize,
    pub dropped_duplicate_id: usize,
    pub malformed: usize,
    /// One-based line numbers of malformed lines.
    pub malformed_lines: Vec<usize>,
}

impl IngestReport {
    pub fn merge(&mut self, other: &IngestReport, line_offset: usize) {
        self.read += other.read;
        self.kept += other.kept;
        self.dropped_empty += other.dropped_empty;
        self.dropped_duplicate_id += other.dropped_duplicate_id;
        self.malformed += other.malformed;
        self.malformed_lines
            .extend(other.malformed_lines.iter().map(|l| l + line_offset));
    }
}

/// Parses and cleans one line-delimited corpus. Blank lines are skipped
/// without being counted. The first occurrence of an id wins.
pub fn ingest_str(text: &str, config: &CleanConfig) -> Result<(Vec<ArticleRecord>, IngestReport)> {
    config.validate()?;
    let mut report = IngestReport::default();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.read += 1;
        let mut rec: ArticleRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                if config.strict {
                    return Err(CorpusError::Malformed {
                        line: i + 1,
                        message: e.to_string(),
                    });
                }
                report.malformed += 1;
                report.malformed_lines.push(i + 1);
                continue;
            }
        };
        if !seen.insert(rec.id.clone()) {
            report.dropped_duplicate_id += 1;
            continue;
        }
        rec.headline = clean_text_with(&rec.headline, config);
        rec.body = clean_text_with(&rec.body, config);
        if rec.headline.is_empty() || rec.body.is_empty() {
            report.dropped_empty += 1;
            continue;
        }
        report.kept += 1;
        out.push(rec);
    }
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitManifest {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train_ids.len(), self.val_ids.len(), self.test_ids.len())
    }

    /// Partitions `records` by the manifest; records it does not list are
    /// ignored.
    pub fn apply<'a>(&self, records: &'a [ArticleRecord]) -> [Vec<&'a ArticleRecord>; 3] {
        let by_id: BTreeMap<&str, &ArticleRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        let pick = |ids: &[String]| ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect();
        [pick(&self.train_ids), pick(&self.val_ids), pick(&self.test_ids)]
    }
}

/// Train and validation sizes round half up; test takes the remainder.
/// Products such as `0.7 * 45` land a hair below the true half in binary,
/// so a relative slack of 1e-9 lets exact decimal halves round up.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    let round = |r: f64| {
        let x = r * n as f64;
        libm::floor(x + 0.5 + 1e-9 * x.max(1.0)) as usize
    };
    let train = round(ratios[0]).min(n);
    let val = round(ratios[1]).min(n - train);
    (train, val, n - train - val)
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r > 0.0)) || libm::fabs(sum - 1.0) > 1e-9 {
        return Err(CorpusError::Ratios(ratios));
    }
    Ok(())
}

/// Sorts ids, shuffles them with a seeded ChaCha8 stream and cuts the
/// sequence by [`split_sizes`]. Input order does not matter.
pub fn split_ids<S: AsRef<str>>(ids: &[S], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    validate_ratios(ratios)?;
    let mut sorted: Vec<String> = ids.iter().map(|s| String::from(s.as_ref())).collect();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let (train, val, _) = split_sizes(sorted.len(), ratios);
    let test_ids = sorted.split_off(train + val);
    let val_ids = sorted.split_off(train);
    Ok(SplitManifest {
        seed,
        ratios,
        train_ids: sorted,
        val_ids,
        test_ids,
    })
}

pub fn split_dataset(records: &[ArticleRecord], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    split_ids(&ids, ratios, seed)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
}

impl CategoryStats {
    /// Rows ordered by descending count, then by name.
    pub fn rows(&self) -> Vec<(&str, u64)> {
        let mut rows: Vec<(&str, u64)> = self.counts.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        rows
    }
}

pub fn category_stats<'a, I: IntoIterator<Item = &'a ArticleRecord>>(records: I) -> CategoryStats {
    let mut stats = CategoryStats::default();
    for r in records {
        *stats.counts.entry(r.category.clone()).or_insert(0) += 1;
        stats.total += 1;
    }
    stats
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub headline_words: (usize, usize),
    pub body_words: (usize, usize),
    pub lexicon_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            headline_words: (3, 12),
            body_words: (50, 400),
            lexicon_size: 400,
        }
    }
}

const CONSONANTS: core::ops::RangeInclusive<u32> = 0x0915..=0x0939;
const VOWEL_SIGNS: [char; 10] = ['ा', 'ि', 'ी', 'ु', 'ू', 'े', 'ै', 'ो', 'ौ', 'ं'];

fn lexicon(rng: &mut ChaCha8Rng, size: usize) -> Vec<String> {
    let mut set = BTreeSet::new();
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let syllables = rng.gen_range(1..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(char::from_u32(rng.gen_range(CONSONANTS)).unwrap_or('क'));
            if rng.gen_bool(0.6) {
                w.push(VOWEL_SIGNS[rng.gen_range(0..VOWEL_SIGNS.len())]);
            }
        }
        if set.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Deterministic Devanagari-only records with the given per-category
/// counts. Each headline repeats the opening words of its body so that
/// the pair is learnable.
pub fn synthesize(counts: &[(String, usize)], seed: u64, config: &SynthConfig) -> Vec<ArticleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = lexicon(&mut rng, config.lexicon_size.max(1));
    let n: usize = counts.iter().map(|c| c.1).sum();
    let mut out = Vec::with_capacity(n);
    for (category, count) in counts {
        for _ in 0..*count {
            let i = out.len();
            let body_len = rng.gen_range(config.body_words.0..=config.body_words.1.max(config.body_words.0));
            let head_len = rng
                .gen_range(config.headline_words.0..=config.headline_words.1.max(config.headline_words.0))
                .min(body_len);
            let words: Vec<&str> = (0..body_len).map(|_| lex[rng.gen_range(0..lex.len())].as_str()).collect();
            out.push(ArticleRecord {
                id: format!("syn-{seed}-{i:06}"),
                source: String::from("synthetic"),
                category: category.clone(),
                headline: words[..head_len].join(" "),
                body: words.join(" "),
                url: None,
                date: None,
            });
        }
    }
    out
}

/// `n` records spread round-robin over [`CATEGORIES`].
pub fn make_synthetic_corpus(n: usize, seed: u64) -> Vec<ArticleRecord> {
    let counts: Vec<(String, usize)> = CATEGORIES
        .iter()
        .enumerate()
        .map(|(i, c)| (String::from(*c), n / 10 + usize::from(i < n % 10)))
        .collect();
    synthesize(&counts, seed, &SynthConfig::default())
}
