//! Blind human evaluation: sessions with shuffled, opaquely keyed options,
//! vote validation, and aggregation of a vote log into counts and
//! percentages.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_CRITERIA: &str = "Select the best headline for the article. Consider relevance, fluency, \
conciseness, informativeness, factual accuracy and coverage.";

/// Options per item are keyed by letters, so at most 26 models.
pub const MAX_OPTIONS: usize = 26;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub model: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemInput {
    pub source: String,
    pub outputs: Vec<ModelOutput>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub items: Vec<ItemInput>,
    pub seed: u64,
    #[serde(default)]
    pub criteria: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOption {
    pub key: String,
    pub summary: String,
}

/// Server-side item; `models` maps option keys back to model names and
/// never leaves the admin side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub source: String,
    pub options: Vec<VoteOption>,
    pub models: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSession {
    pub session_id: String,
    pub criteria: String,
    pub created_at: String,
    pub seed: u64,
    /// Model names in order of first appearance in the request.
    pub models: Vec<String>,
    pub items: Vec<EvalItem>,
}

/// What a rater sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindItem {
    pub item_id: String,
    pub source: String,
    pub options: Vec<VoteOption>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindSession {
    pub session_id: String,
    pub criteria: String,
    pub items: Vec<BlindItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRequest {
    pub rater_id: String,
    pub item_id: String,
    pub option_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub session_id: String,
    pub item_id: String,
    pub rater_id: String,
    pub option_key: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTally {
    pub model: String,
    pub votes: u64,
    /// Percentage in hundredths of a percent, rounded half up.
    pub hundredths: u64,
    pub percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub models: Vec<ModelTally>,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("invalid session request: {0}")]
    Invalid(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("option {option} is not valid for item {item}")]
    UnknownOption { item: String, option: String },
    #[error("malformed rater token")]
    RaterToken,
}

pub type Result<T, E = EvalError> = core::result::Result<T, E>;

/// Rater tokens are 8 to 64 characters from `[A-Za-z0-9_-]`.
pub fn valid_rater_token(token: &str) -> bool {
    (8..=64).contains(&token.len())
        && token
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn option_key(i: usize) -> String {
    String::from(char::from(b'A' + i as u8))
}

/// Builds a session. Option order for item `i` is a shuffle driven by
/// ChaCha8 seeded with `seed` on stream `i`.
pub fn create_session(
    session_id: String,
    created_at: String,
    request: &SessionRequest,
) -> Result<EvalSession> {
    if request.items.is_empty() {
        return Err(EvalError::Invalid(String::from("session needs at least one item")));
    }
    let width = request.items[0].outputs.len();
    let mut items = Vec::with_capacity(request.items.len());
    let mut model_order: Vec<String> = Vec::new();
    for (i, item) in request.items.iter().enumerate() {
        let n = item.outputs.len();
        if !(2..=MAX_OPTIONS).contains(&n) {
            return Err(EvalError::Invalid(format!(
                "item {i} has {n} outputs; need 2 to {MAX_OPTIONS}"
            )));
        }
        if n != width {
            return Err(EvalError::Invalid(format!(
                "item {i} has {n} outputs but item 0 has {width}"
            )));
        }
        let mut names: Vec<&str> = item.outputs.iter().map(|o| o.model.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(EvalError::Invalid(format!("item {i} repeats model {}", w[0])));
        }
        if names.iter().any(|m| m.is_empty()) {
            return Err(EvalError::Invalid(format!("item {i} has an empty model name")));
        }
        for o in &item.outputs {
            if !model_order.contains(&o.model) {
                model_order.push(o.model.clone());
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        rng.set_stream(i as u64);
        order.shuffle(&mut rng);
        let mut options = Vec::with_capacity(n);
        let mut models = BTreeMap::new();
        for (slot, &src) in order.iter().enumerate() {
            let key = option_key(slot);
            options.push(VoteOption {
                key: key.clone(),
                summary: item.outputs[src].summary.clone(),
            });
            models.insert(key, item.outputs[src].model.clone());
        }
        items.push(EvalItem {
            item_id: format!("item-{}", i + 1),
            source: item.source.clone(),
            options,
            models,
        });
    }
    Ok(EvalSession {
        session_id,
        criteria: request
            .criteria
            .clone()
            .unwrap_or_else(|| String::from(DEFAULT_CRITERIA)),
        created_at,
        seed: request.seed,
        models: model_order,
        items,
    })
}

impl EvalSession {
    pub fn blind(&self) -> BlindSession {
        BlindSession {
            session_id: self.session_id.clone(),
            criteria: self.criteria.clone(),
            items: self
                .items
                .iter()
                .map(|it| BlindItem {
                    item_id: it.item_id.clone(),
                    source: it.source.clone(),
                    options: it.options.clone(),
                })
                .collect(),
        }
    }

    pub fn item(&self, item_id: &str) -> Option<&EvalItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn validate_vote(&self, vote: &VoteRequest) -> Result<()> {
        if !valid_rater_token(&vote.rater_id) {
            return Err(EvalError::RaterToken);
        }
        let item = self
            .item(&vote.item_id)
            .ok_or_else(|| EvalError::UnknownItem(vote.item_id.clone()))?;
        if !item.models.contains_key(&vote.option_key) {
            return Err(EvalError::UnknownOption {
                item: vote.item_id.clone(),
                option: vote.option_key.clone(),
            });
        }
        Ok(())
    }

    /// Latest vote per `(rater, item)` in log order, mapped to models.
    /// Records that do not belong to this session or fail validation are
    /// skipped.
    pub fn tally(&self, log: &[VoteRecord]) -> Aggregate {
        let mut latest: BTreeMap<(&str, &str), &str> = BTreeMap::new();
        for v in log.iter().filter(|v| v.session_id == self.session_id) {
            let ok = valid_rater_token(&v.rater_id)
                && self
                    .item(&v.item_id)
                    .is_some_and(|i| i.models.contains_key(&v.option_key));
            if ok {
                latest.insert((&v.rater_id, &v.item_id), &v.option_key);
            }
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for ((_, item), key) in latest {
            let model = &self.item(item).expect("validated above").models[key];
            *counts.entry(model.clone()).or_insert(0) += 1;
        }
        let rows: Vec<(String, u64)> = self
            .models
            .iter()
            .map(|m| (m.clone(), counts.get(m).copied().unwrap_or(0)))
            .collect();
        aggregate_counts(&rows)
    }
}

/// `100·count/total` in hundredths, rounded half up with integer math.
pub fn percent_hundredths(count: u64, total: u64) -> u64 {
    if total == 0 {
        return 0;
    }
    (count * 20_000 + total) / (2 * total)
}

pub fn aggregate_counts(counts: &[(String, u64)]) -> Aggregate {
    let total = counts.iter().map(|c| c.1).sum();
    Aggregate {
        models: counts
            .iter()
            .map(|(m, c)| {
                let h = percent_hundredths(*c, total);
                ModelTally {
                    model: m.clone(),
                    votes: *c,
                    hundredths: h,
                    percentage: h as f64 / 100.0,
                }
            })
            .collect(),
        total,
    }
}

impl Aggregate {
    /// `"34.06"`-style rendering of a tally's percentage.
    pub fn format_percent(t: &ModelTally) -> String {
        format!("{}.{:02}", t.hundredths / 100, t.hundredths % 100)
    }
}
