//! Run directories. Each fine-tuning invocation gets a fresh directory
//! holding the effective config, a copy of the tokenizer, one checkpoint
//! per epoch and `run.jsonl`, a line-delimited log whose first entry echoes
//! the config and whose later entries are epoch reports.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use nphd_core::model::Seq2SeqModel;
use nphd_core::tokenizer::SubwordTokenizer;
use nphd_core::trainer::{EpochHook, EpochReport};

use crate::checkpoint::{Checkpoint, QuantSpec};
use crate::config::RunConfig;

pub const RUN_LOG: &str = "run.jsonl";
pub const CONFIG_ECHO: &str = "config.toml";
pub const TOKENIZER_COPY: &str = "tokenizer.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Config { config: RunConfig },
    Epoch { report: EpochReport },
}

/// Creates `root/run-<timestamp>[-n]`, never reusing an existing name.
pub fn create_run_dir(root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    for n in 0.. {
        let name = if n == 0 { format!("run-{stamp}") } else { format!("run-{stamp}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!("unbounded search")
}

pub fn append_log(dir: &Path, entry: &LogEntry) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(RUN_LOG))
        .context("opening run log")?;
    let mut line = serde_json::to_vec(entry)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

/// Parsed log entries; a torn final line is ignored.
pub fn read_log(dir: &Path) -> Result<Vec<LogEntry>> {
    let text = fs::read_to_string(dir.join(RUN_LOG)).context("reading run log")?;
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch}.nphd")
}

/// Checkpoint of the highest completed epoch in a run directory.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    read_log(dir)?
        .into_iter()
        .rev()
        .find_map(|e| match e {
            LogEntry::Epoch { report } => report.checkpoint.map(|c| dir.join(c)),
            _ => None,
        })
        .with_context(|| format!("no completed epoch in {}", dir.display()))
}

/// Stamps wall-clock time, writes a checkpoint and appends the report.
pub struct RunHook<'a> {
    pub dir: PathBuf,
    pub tokenizer: &'a SubwordTokenizer,
    pub quant: Option<QuantSpec>,
    pub started: Instant,
    pub verbose: bool,
}

impl EpochHook<f32> for RunHook<'_> {
    fn on_epoch_end(&mut self, report: &mut EpochReport, model: &Seq2SeqModel<f32>) -> Result<(), String> {
        report.wall_seconds = self.started.elapsed().as_secs_f64();
        let name = checkpoint_name(report.epoch);
        Checkpoint::from_model(model, self.quant, self.tokenizer, report.epoch)
            .and_then(|c| c.save(&self.dir.join(&name)))
            .map_err(|e| e.to_string())?;
        report.checkpoint = Some(name);
        append_log(&self.dir, &LogEntry::Epoch { report: report.clone() }).map_err(|e| e.to_string())?;
        if self.verbose {
            let rouge = report
                .validation
                .map(|v| format!(" R1 {:.4} R2 {:.4} RL {:.4}", v.rouge1.f1, v.rouge2.f1, v.rouge_l.f1))
                .unwrap_or_default();
            eprintln!(
                "epoch {} loss {:.4}{rouge} ({:.1}s)",
                report.epoch, report.mean_train_loss, report.wall_seconds
            );
        }
        Ok(())
    }
}
