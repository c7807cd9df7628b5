//! Corpus, split-manifest and tokenizer files.
//!
//! A corpus is UTF-8 JSON Lines, one `ArticleRecord` per line. A corpus
//! path may also be a directory, in which case every `*.jsonl` file inside
//! it is read in name order as one corpus.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use nphd_core::corpus::{ingest_str, ArticleRecord, CleanConfig, IngestReport, SplitManifest};
use nphd_core::tokenizer::SubwordTokenizer;

fn corpus_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading directory {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("no .jsonl files in {}", path.display());
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Reads, cleans and deduplicates a corpus. Duplicate ids are detected
/// across all shards; the first occurrence wins.
pub fn read_corpus(path: &Path, config: &CleanConfig) -> Result<(Vec<ArticleRecord>, IngestReport)> {
    let mut records: Vec<ArticleRecord> = Vec::new();
    let mut report = IngestReport::default();
    let mut seen = std::collections::HashSet::new();
    let mut offset = 0;
    for file in corpus_files(path)? {
        let text = fs::read_to_string(&file).with_context(|| format!("reading corpus {}", file.display()))?;
        let (recs, rep) = ingest_str(&text, config).with_context(|| format!("ingesting {}", file.display()))?;
        report.merge(&rep, offset);
        offset += text.lines().count();
        for r in recs {
            if seen.insert(r.id.clone()) {
                records.push(r);
            } else {
                report.kept -= 1;
                report.dropped_duplicate_id += 1;
            }
        }
    }
    Ok((records, report))
}

pub fn write_corpus(path: &Path, records: &[ArticleRecord]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    write_json(path, manifest)
}

pub fn read_manifest(path: &Path) -> Result<SplitManifest> {
    read_json(path)
}

pub fn write_tokenizer(path: &Path, tok: &SubwordTokenizer) -> Result<()> {
    fs::write(path, tok.to_json()).with_context(|| format!("writing {}", path.display()))
}

pub fn read_tokenizer(path: &Path) -> Result<SubwordTokenizer> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SubwordTokenizer::from_json(&text).with_context(|| format!("loading tokenizer {}", path.display()))
}

/// Parses `News=36798,Sports=18767` into ordered `(category, count)` pairs.
pub fn parse_counts(spec: &str) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let Some((name, n)) = part.rsplit_once('=') else {
            bail!("category count {part:?} must look like Name=123");
        };
        let n: usize = n.trim().parse().with_context(|| format!("count in {part:?}"))?;
        out.push((name.trim().to_string(), n));
    }
    if out.is_empty() {
        bail!("no category counts given");
    }
    Ok(out)
}

/// Category counts from a `--categories` argument: either inline
/// `Name=count` pairs or a TOML file of `[[categories]]` entries with
/// `name` and `count`.
pub fn load_counts(arg: &str) -> Result<Vec<(String, usize)>> {
    let path = Path::new(arg);
    if !path.is_file() {
        return parse_counts(arg);
    }
    #[derive(serde::Deserialize)]
    struct CountsFile {
        categories: Vec<Entry>,
    }
    #[derive(serde::Deserialize)]
    struct Entry {
        name: String,
        count: usize,
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
    let file: CountsFile = toml::from_str(&text).with_context(|| format!("parsing {arg}"))?;
    Ok(file.categories.into_iter().map(|e| (e.name, e.count)).collect())
}
