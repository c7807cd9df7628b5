//! Command line. Exit codes: 0 success, 1 invalid input or usage, 2
//! runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nphd_core::corpus::{category_stats, split_dataset, synthesize, ArticleRecord, SynthConfig, CATEGORIES};
use nphd_core::evalsvc::{aggregate_counts, Aggregate};
use nphd_core::model::{GenerateConfig, Seq2SeqModel, Strategy};
use nphd_core::rouge::RougeReport;
use nphd_core::tokenizer::{train_tokenizer, SubwordTokenizer};
use nphd_core::trainer::{evaluate, finetune, EvalExample};

use crate::checkpoint::{build_base, Checkpoint, QuantSpec};
use crate::config::RunConfig;
use crate::files;
use crate::runs::{self, LogEntry, RunHook};
use crate::server::{self, AppState, ADMIN_SECRET_ENV};
use crate::store::SessionStore;

/// Marks an error as caused by bad input rather than a runtime failure.
#[derive(Debug, thiserror::Error)]
#[error("{0:#}")]
pub struct InvalidInput(pub anyhow::Error);

trait OrInvalid<T> {
    fn invalid(self) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> OrInvalid<T> for std::result::Result<T, E> {
    fn invalid(self) -> Result<T> {
        self.map_err(|e| InvalidInput(e.into()).into())
    }
}

fn invalid(msg: impl std::fmt::Display) -> anyhow::Error {
    InvalidInput(anyhow::anyhow!("{msg}")).into()
}

#[derive(Parser, Debug)]
#[command(name = "nphd", version, about = "Nepali headline summarization workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Clean and deduplicate a raw JSON Lines corpus.
    Ingest(IngestArgs),
    /// Split a corpus into train/validation/test id lists.
    Split(SplitArgs),
    /// Print article counts per category.
    Stats(StatsArgs),
    /// Learn a subword vocabulary from a corpus.
    TrainTokenizer(TokenizerArgs),
    /// Fine-tune adapters; every invocation writes a new run directory.
    Finetune(FinetuneArgs),
    /// Generate headlines with a checkpoint.
    Generate(GenerateArgs),
    /// Score generated headlines against references with ROUGE.
    Score(ScoreArgs),
    /// Run the human-evaluation HTTP service.
    ServeEval(ServeArgs),
    /// Aggregate votes into counts and percentages.
    Aggregate(AggregateArgs),
    /// Write a synthetic Devanagari corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Preset name (toy) or path to a TOML config file.
    #[arg(long, default_value = "toy")]
    pub config: String,
    /// Override a config value, e.g. `--set trainer.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides).invalid()
    }
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Raw corpus file, or a directory of `*.jsonl` shards.
    #[arg(long)]
    pub input: PathBuf,
    /// Cleaned corpus output.
    #[arg(long)]
    pub out: PathBuf,
    /// Abort on the first malformed line instead of skipping it.
    #[arg(long)]
    pub strict: bool,
    /// Also write the ingest report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Manifest output (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Shuffle seed; defaults to `corpus.split_seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Three comma-separated ratios; defaults to the config.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub ratios: Option<Vec<f64>>,
    /// Fail unless the corpus holds exactly this many records.
    #[arg(long)]
    pub n_check: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TokenizerArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Train only on the training split of this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `tokenizer.vocab_size` from the config.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Use only the first N training records.
    #[arg(long)]
    pub limit_train: Option<usize>,
    /// Use only the first N validation records.
    #[arg(long)]
    pub limit_val: Option<usize>,
    /// Train on the training split and validate on it as well.
    #[arg(long)]
    pub validate_on_train: bool,
    /// Oversample: every epoch visits each training pair this many times.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub repeat: u32,
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug, Clone)]
pub struct ModelSource {
    /// Checkpoint file, or a run directory (its latest checkpoint is used).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the tokenizer copy inside the run directory.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Use the checkpoint's base model with fresh adapters, as before
    /// training.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelSource,
    /// Article text; repeat for several articles.
    #[arg(long)]
    pub text: Vec<String>,
    /// Read articles from a corpus instead.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Restrict to one split of this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Report output; defaults to `rouge-<split>.json` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Directory holding session definitions and vote logs.
    #[arg(long, default_value = "eval-store")]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Shared secret for admin endpoints.
    #[arg(long, env = ADMIN_SECRET_ENV, hide_env_values = true)]
    pub admin_secret: String,
}

#[derive(Args, Debug)]
pub struct AggregateArgs {
    /// Session store directory.
    #[arg(long, requires = "session")]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub session: Option<String>,
    /// Aggregate raw counts instead, e.g. `A=235,B=191`.
    #[arg(long, conflicts_with_all = ["store", "session"])]
    pub counts: Option<String>,
    /// Also export the table as tab-separated text.
    #[arg(long)]
    pub export: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of records, spread round-robin over the ten categories.
    #[arg(long, conflicts_with = "categories")]
    pub n: Option<usize>,
    /// Per-category counts: `Name=count,...` or a TOML file.
    #[arg(long)]
    pub categories: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Headline length range in words, e.g. `3-12`.
    #[arg(long, default_value = "3-12")]
    pub headline_words: String,
    /// Body length range in words, e.g. `50-400`.
    #[arg(long, default_value = "50-400")]
    pub body_words: String,
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once('-').ok_or_else(|| invalid(format!("range {s:?} must look like MIN-MAX")))?;
    let (a, b): (usize, usize) = (a.trim().parse().invalid()?, b.trim().parse().invalid()?);
    if a == 0 || a > b {
        return Err(invalid(format!("range {s:?} must satisfy 1 <= MIN <= MAX")));
    }
    Ok((a, b))
}

/// Thousands separators: 70769 → "70,769".
pub fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn format_rouge(r: &RougeReport) -> String {
    let mut s = format!("{:<8} {:>9} {:>9} {:>9}\n", "metric", "precision", "recall", "f1");
    for (name, m) in [("rouge1", r.rouge1), ("rouge2", r.rouge2), ("rougeL", r.rouge_l)] {
        s += &format!("{name:<8} {:>9.4} {:>9.4} {:>9.4}\n", m.precision, m.recall, m.f1);
    }
    s
}

pub fn format_aggregate(a: &Aggregate) -> String {
    let width = a.models.iter().map(|m| m.model.chars().count()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:>6}  {:>7}\n", "model", "votes", "percent");
    for t in &a.models {
        s += &format!("{:<width$}  {:>6}  {:>7}\n", t.model, t.votes, Aggregate::format_percent(t));
    }
    s += &format!("{:<width$}  {:>6}\n", "total", a.total);
    s
}

pub fn aggregate_tsv(a: &Aggregate) -> String {
    let mut s = String::from("model\tvotes\tpercent\n");
    for t in &a.models {
        s += &format!("{}\t{}\t{}\n", t.model, t.votes, Aggregate::format_percent(t));
    }
    s
}

fn records_for_split<'a>(
    records: &'a [ArticleRecord],
    manifest: Option<&Path>,
    split: &str,
) -> Result<Vec<&'a ArticleRecord>> {
    let Some(path) = manifest else {
        return Ok(records.iter().collect());
    };
    let m = files::read_manifest(path).invalid()?;
    let [train, val, test] = m.apply(records);
    let chosen = match split {
        "train" => train,
        "val" => val,
        _ => test,
    };
    let wanted = match split {
        "train" => m.train_ids.len(),
        "val" => m.val_ids.len(),
        _ => m.test_ids.len(),
    };
    if chosen.len() != wanted {
        return Err(invalid(format!(
            "manifest lists {wanted} {split} ids but the corpus holds {} of them",
            chosen.len()
        )));
    }
    Ok(chosen)
}

struct LoadedModel {
    model: Seq2SeqModel<f32>,
    tokenizer: SubwordTokenizer,
    max_source_len: usize,
    report_dir: PathBuf,
}

fn load_model(src: &ModelSource) -> Result<LoadedModel> {
    let (ckpt_path, run_dir) = if src.checkpoint.is_dir() {
        (runs::latest_checkpoint(&src.checkpoint).invalid()?, Some(src.checkpoint.clone()))
    } else {
        let parent = src.checkpoint.parent().map(Path::to_path_buf);
        let run_dir = parent.filter(|p| p.join(runs::RUN_LOG).exists());
        (src.checkpoint.clone(), run_dir)
    };
    let ckpt = Checkpoint::load(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))
        .invalid()?;
    let tok_path = match (&src.tokenizer, &run_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join(runs::TOKENIZER_COPY),
        (None, None) => return Err(invalid("--tokenizer is required outside a run directory")),
    };
    let tokenizer = files::read_tokenizer(&tok_path).invalid()?;
    ckpt.check_tokenizer(&tokenizer).invalid()?;
    let model = if src.baseline {
        let mut m = build_base(&ckpt.header.model, ckpt.header.quant)?;
        m.attach_lora(&ckpt.header.lora, 0)?;
        m
    } else {
        ckpt.restore()?
    };
    let max_source_len = run_dir
        .as_ref()
        .and_then(|d| std::fs::read_to_string(d.join(runs::CONFIG_ECHO)).ok())
        .and_then(|t| toml::from_str::<RunConfig>(&t).ok())
        .map_or(nphd_core::tokenizer::MAX_SOURCE_LEN, |c| c.data.max_source_len);
    let report_dir = ckpt_path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok(LoadedModel {
        model,
        tokenizer,
        max_source_len,
        report_dir,
    })
}

fn cmd_ingest(a: IngestArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = a.config.load()?;
    cfg.corpus.strict |= a.strict;
    let (records, report) = match files::read_corpus(&a.input, &cfg.corpus.clean_config()) {
        Ok(v) => v,
        Err(e) if e.chain().any(|c| c.is::<nphd_core::corpus::CorpusError>()) => return Err(InvalidInput(e).into()),
        Err(e) => return Err(e),
    };
    files::write_corpus(&a.out, &records)?;
    if let Some(p) = &a.report {
        files::write_json(p, &report)?;
    }
    writeln!(
        out,
        "read {} kept {} dropped_empty {} dropped_duplicate_id {} malformed {}",
        report.read, report.kept, report.dropped_empty, report.dropped_duplicate_id, report.malformed
    )?;
    Ok(())
}

fn cmd_split(a: SplitArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.config.load()?;
    let (records, _) = files::read_corpus(&a.corpus, &cfg.corpus.clean_config())?;
    if let Some(n) = a.n_check {
        if records.len() != n {
            return Err(invalid(format!("expected {n} records, corpus holds {}", records.len())));
        }
    }
    let ratios = match a.ratios {
        Some(r) => [r[0], r[1], r[2]],
        None => cfg.corpus.ratios,
    };
    let manifest = split_dataset(&records, ratios, a.seed.unwrap_or(cfg.corpus.split_seed)).invalid()?;
    if let Some(p) = &a.out {
        files::write_manifest(p, &manifest)?;
    }
    let (tr, va, te) = manifest.sizes();
    writeln!(out, "train {tr} val {va} test {te}")?;
    Ok(())
}

fn cmd_stats(a: StatsArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.config.load()?;
    let (records, _) = files::read_corpus(&a.corpus, &cfg.corpus.clean_config())?;
    let stats = category_stats(&records);
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&stats)?)?;
        return Ok(());
    }
    let width = stats.counts.keys().map(|k| k.chars().count()).max().unwrap_or(8).max(8);
    writeln!(out, "{:<width$}  {:>8}", "category", "count")?;
    for (name, n) in stats.rows() {
        writeln!(out, "{name:<width$}  {:>8}", group_digits(n))?;
    }
    writeln!(out, "{:<width$}  {:>8}", "total", group_digits(stats.total))?;
    Ok(())
}

fn cmd_train_tokenizer(a: TokenizerArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.config.load()?;
    let (records, _) = files::read_corpus(&a.corpus, &cfg.corpus.clean_config())?;
    let chosen = records_for_split(&records, a.manifest.as_deref(), "train")?;
    let texts: Vec<&str> = chosen.iter().flat_map(|r| [r.headline.as_str(), r.body.as_str()]).collect();
    let vocab = a.vocab_size.unwrap_or(cfg.tokenizer.vocab_size);
    let tok = train_tokenizer(&texts, vocab, &cfg.tokenizer.task_prefix).invalid()?;
    files::write_tokenizer(&a.out, &tok)?;
    writeln!(out, "vocab {} merges {}", tok.vocab_size(), tok.merges().len())?;
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = a.config.load()?;
    let tokenizer = files::read_tokenizer(&a.tokenizer).invalid()?;
    cfg.model.vocab_size = tokenizer.vocab_size();
    cfg.tokenizer.vocab_size = tokenizer.vocab_size();
    cfg.tokenizer.task_prefix = tokenizer.task_prefix().to_string();
    cfg.validate().invalid()?;
    let (records, _) = files::read_corpus(&a.corpus, &cfg.corpus.clean_config())?;
    let mut train = records_for_split(&records, Some(&a.manifest), "train")?;
    let mut val = if a.validate_on_train {
        train.clone()
    } else {
        records_for_split(&records, Some(&a.manifest), "val")?
    };
    if let Some(n) = a.limit_train {
        train.truncate(n);
    }
    if let Some(n) = a.limit_val {
        val.truncate(n);
    }
    let d = &cfg.data;
    let once: Vec<_> = train
        .iter()
        .map(|r| tokenizer.encode_example(&r.body, &r.headline, d.max_source_len, d.max_target_len))
        .collect();
    let train_ex: Vec<_> = (0..a.repeat).flat_map(|_| once.iter().cloned()).collect();
    let val_ex: Vec<EvalExample> = val
        .iter()
        .map(|r| EvalExample {
            input_ids: tokenizer.encode(&r.body, d.max_source_len, true),
            reference: r.headline.clone(),
        })
        .collect();
    let quant = cfg.quant.scheme.map(|scheme| QuantSpec {
        scheme,
        block_size: cfg.quant.block_size,
    });
    let mut model = build_base(&cfg.model, quant)?;
    model.attach_lora(&cfg.lora.lora_config(), cfg.lora.seed)?;

    let dir = runs::create_run_dir(&a.runs_dir)?;
    std::fs::write(dir.join(runs::CONFIG_ECHO), cfg.to_toml())?;
    files::write_tokenizer(&dir.join(runs::TOKENIZER_COPY), &tokenizer)?;
    runs::append_log(&dir, &LogEntry::Config { config: cfg.clone() })?;
    if !a.quiet {
        eprintln!(
            "training {} adapter parameters on {} pairs, validating on {}",
            model.trainable_parameter_count(),
            train_ex.len(),
            val_ex.len()
        );
    }
    let mut hook = RunHook {
        dir: dir.clone(),
        tokenizer: &tokenizer,
        quant,
        started: Instant::now(),
        verbose: !a.quiet,
    };
    let reports = match finetune(&mut model, &tokenizer, &train_ex, &val_ex, &cfg.trainer, &mut hook) {
        Ok(r) => r,
        Err(e @ nphd_core::trainer::TrainError::Config(_)) => return Err(InvalidInput(e.into()).into()),
        Err(e) => return Err(e.into()),
    };
    for r in &reports {
        let v = r.validation.unwrap_or_default();
        writeln!(
            out,
            "epoch {} loss {:.4} rouge1 {:.4} rouge2 {:.4} rougeL {:.4}",
            r.epoch, r.mean_train_loss, v.rouge1.f1, v.rouge2.f1, v.rouge_l.f1
        )?;
    }
    writeln!(out, "run {}", dir.display())?;
    Ok(())
}

fn gen_config(tok: &SubwordTokenizer, max_len: usize, beam: Option<usize>) -> Result<GenerateConfig> {
    if max_len == 0 || max_len > nphd_core::tokenizer::MAX_TARGET_LEN {
        return Err(invalid("--max-len must be in 1..=20"));
    }
    let s = tok.special_ids();
    Ok(GenerateConfig {
        max_len,
        strategy: match beam {
            None => Strategy::Greedy,
            Some(0) => return Err(invalid("--beam must be at least 1")),
            Some(k) => Strategy::Beam(k),
        },
        begin_id: s.bos,
        end_id: s.eos,
    })
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let m = load_model(&a.model)?;
    let gen = gen_config(&m.tokenizer, a.max_len, a.beam)?;
    let mut texts = a.text.clone();
    if let Some(c) = &a.corpus {
        let (records, _) = files::read_corpus(c, &Default::default())?;
        texts.extend(records.into_iter().map(|r| r.body));
    }
    if let Some(n) = a.limit {
        texts.truncate(n);
    }
    if texts.is_empty() {
        return Err(invalid("give --text or --corpus"));
    }
    for t in texts {
        let ids = m.tokenizer.encode(&nphd_core::corpus::clean_text(&t), m.max_source_len, true);
        let headline = m.tokenizer.decode(&m.model.generate(&ids, &gen)?);
        writeln!(out, "{headline}")?;
    }
    Ok(())
}

fn cmd_score(a: ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let m = load_model(&a.model)?;
    let (records, _) = files::read_corpus(&a.corpus, &Default::default())?;
    let mut chosen = records_for_split(&records, a.manifest.as_deref(), &a.split)?;
    if let Some(n) = a.limit {
        chosen.truncate(n);
    }
    if chosen.is_empty() {
        return Err(invalid("nothing to score"));
    }
    let examples: Vec<EvalExample> = chosen
        .iter()
        .map(|r| EvalExample {
            input_ids: m.tokenizer.encode(&r.body, m.max_source_len, true),
            reference: r.headline.clone(),
        })
        .collect();
    let gen = gen_config(&m.tokenizer, nphd_core::tokenizer::MAX_TARGET_LEN, None)?;
    let report = evaluate(&m.model, &examples, &m.tokenizer, &gen)?;
    let path = a.out.clone().unwrap_or_else(|| {
        let tag = if a.model.baseline { "-baseline" } else { "" };
        let split = if a.manifest.is_some() { a.split.as_str() } else { "all" };
        m.report_dir.join(format!("rouge-{split}{tag}.json"))
    });
    files::write_json(&path, &report)?;
    write!(out, "{}", format_rouge(&report))?;
    writeln!(out, "written {}", path.display())?;
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let store = SessionStore::open(&a.store)?;
    let state = Arc::new(AppState::new(store, a.admin_secret).invalid()?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        eprintln!("serving on http://{}", listener.local_addr()?);
        server::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
}

fn cmd_aggregate(a: AggregateArgs, out: &mut dyn Write) -> Result<()> {
    let agg = match (&a.counts, &a.store, &a.session) {
        (Some(c), _, _) => {
            let counts = files::parse_counts(c).invalid()?;
            aggregate_counts(&counts.into_iter().map(|(m, n)| (m, n as u64)).collect::<Vec<_>>())
        }
        (None, Some(store), Some(id)) => {
            let store = SessionStore::open(store)?;
            let session = store
                .load_session(id)
                .invalid()?
                .ok_or_else(|| invalid(format!("unknown session {id}")))?;
            session.tally(&store.read_votes(id)?)
        }
        _ => return Err(invalid("give --counts or --store with --session")),
    };
    if let Some(p) = &a.export {
        std::fs::write(p, aggregate_tsv(&agg))?;
    }
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&agg)?)?;
    } else {
        write!(out, "{}", format_aggregate(&agg))?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = SynthConfig {
        headline_words: parse_range(&a.headline_words)?,
        body_words: parse_range(&a.body_words)?,
        ..SynthConfig::default()
    };
    let counts: Vec<(String, usize)> = match (&a.categories, a.n) {
        (Some(c), _) => files::load_counts(c).invalid()?,
        (None, Some(n)) => CATEGORIES
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), n / CATEGORIES.len() + usize::from(i < n % CATEGORIES.len())))
            .collect(),
        (None, None) => bail!(invalid("give --n or --categories")),
    };
    let records = synthesize(&counts, a.seed, &cfg);
    files::write_corpus(&a.out, &records)?;
    writeln!(out, "wrote {} records to {}", records.len(), a.out.display())?;
    Ok(())
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a, out),
        Command::Split(a) => cmd_split(a, out),
        Command::Stats(a) => cmd_stats(a, out),
        Command::TrainTokenizer(a) => cmd_train_tokenizer(a, out),
        Command::Finetune(a) => cmd_finetune(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Score(a) => cmd_score(a, out),
        Command::ServeEval(a) => cmd_serve(a),
        Command::Aggregate(a) => cmd_aggregate(a, out),
        Command::Synth(a) => cmd_synth(a, out),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<InvalidInput>() {
                1
            } else {
                2
            }
        }
    }
}
