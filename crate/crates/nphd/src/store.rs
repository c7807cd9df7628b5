//! On-disk evaluation sessions: `root/<session_id>/session.json` holds the
//! definition (including the hidden option → model mapping) and
//! `root/<session_id>/votes.jsonl` is the append-only vote log.

use std::fs::{self, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use nphd_core::evalsvc::{EvalSession, VoteRecord};

pub const SESSION_FILE: &str = "session.json";
pub const VOTE_LOG: &str = "votes.jsonl";

#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

/// Session ids double as directory names, so only `[A-Za-z0-9_-]` is
/// accepted.
pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// Parses a vote log. Only newline-terminated lines that parse as a
/// record count, so a write torn by a crash is dropped and every complete
/// record around it is kept.
pub fn parse_vote_log(text: &str) -> Vec<VoteRecord> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find('\n') {
        let line = &rest[..pos];
        rest = &rest[pos + 1..];
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) => continue,
        }
    }
    out
}

impl SessionStore {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating store {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf> {
        if !valid_session_id(id) {
            bail!("invalid session id {id:?}");
        }
        Ok(self.root.join(id))
    }

    pub fn save_session(&self, session: &EvalSession) -> Result<()> {
        let dir = self.dir(&session.session_id)?;
        fs::create_dir(&dir).with_context(|| format!("session {} already exists", session.session_id))?;
        let tmp = dir.join("session.json.partial");
        fs::write(&tmp, serde_json::to_vec_pretty(session)?)?;
        fs::rename(&tmp, dir.join(SESSION_FILE))?;
        fs::File::create(dir.join(VOTE_LOG))?;
        Ok(())
    }

    pub fn load_session(&self, id: &str) -> Result<Option<EvalSession>> {
        let path = self.dir(id)?.join(SESSION_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
    }

    pub fn session_ids(&self) -> Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(SESSION_FILE).exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Appends one record as a single write and syncs it to disk. A torn
    /// previous line is sealed with a newline first so that it cannot
    /// swallow this record.
    pub fn append_vote(&self, vote: &VoteRecord) -> Result<()> {
        let path = self.dir(&vote.session_id)?.join(VOTE_LOG);
        let mut line = serde_json::to_vec(vote)?;
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        let len = f.metadata()?.len();
        if len > 0 {
            let mut last = [0u8; 1];
            f.seek(SeekFrom::Start(len - 1))?;
            f.read_exact(&mut last)?;
            if last[0] != b'\n' {
                line.insert(0, b'\n');
            }
        }
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }

    pub fn read_votes(&self, id: &str) -> Result<Vec<VoteRecord>> {
        let path = self.dir(id)?.join(VOTE_LOG);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(parse_vote_log(&text)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }
}
