//! Raw session logs to indexed, temporally split, prefix-augmented examples.
//!
//! The pipeline is `parse_events → build_sessions → filter_dataset →
//! temporal_split → build_vocab → augment`, wrapped by [`preprocess`]. Its
//! output, a [`DatasetBundle`], is the file every later command consumes.

use std::collections::HashMap;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::GlobalGraph;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub session_key: String,
    pub item_key: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormatDescriptor {
    pub delimiter: char,
    pub has_header: bool,
    /// Fraction of malformed rows tolerated before parsing aborts.
    pub max_error_ratio: f64,
}

impl Default for FormatDescriptor {
    fn default() -> Self {
        Self {
            delimiter: '\t',
            has_header: false,
            max_error_ratio: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedEvents {
    pub events: Vec<RawEvent>,
    pub errors: Vec<LineError>,
}

/// Parses delimiter-separated `(session, item, timestamp)` rows.
///
/// Malformed rows are skipped and recorded with their 1-based line number;
/// if the share of malformed rows exceeds `max_error_ratio` the whole parse
/// fails. Blank lines are ignored.
pub fn parse_events<R: BufRead>(reader: R, format: &FormatDescriptor) -> Result<ParsedEvents> {
    let mut out = ParsedEvents::default();
    let mut rows = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
        if i == 0 && format.has_header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let cols: Vec<&str> = line.split(format.delimiter).collect();
        if cols.len() != 3 {
            out.errors.push(LineError {
                line: line_no,
                reason: format!("expected 3 columns, found {}", cols.len()),
            });
            continue;
        }
        let timestamp = match cols[2].trim().parse::<i64>() {
            Ok(t) => t,
            Err(_) => {
                out.errors.push(LineError {
                    line: line_no,
                    reason: format!("bad timestamp {:?}", cols[2]),
                });
                continue;
            }
        };
        out.events.push(RawEvent {
            session_key: cols[0].to_string(),
            item_key: cols[1].to_string(),
            timestamp,
        });
    }
    for e in &out.errors {
        log::warn!("skipping line {}: {}", e.line, e.reason);
    }
    if rows > 0 && out.errors.len() as f64 / rows as f64 > format.max_error_ratio {
        return Err(Error::Data(format!(
            "{} of {} rows malformed (first at line {}), above the {} error ratio",
            out.errors.len(),
            rows,
            out.errors[0].line,
            format.max_error_ratio
        )));
    }
    Ok(out)
}

/// A session before vocabulary indexing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSession {
    pub key: String,
    pub items: Vec<String>,
    pub start_time: i64,
}

/// Groups events by session key and orders each group by timestamp, ties
/// kept in input order. Sessions come back ordered by start time, ties in
/// order of first appearance.
pub fn build_sessions(events: &[RawEvent]) -> Vec<RawSession> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<(i64, &str)>> = HashMap::new();
    for e in events {
        groups
            .entry(e.session_key.as_str())
            .or_insert_with(|| {
                order.push(e.session_key.as_str());
                Vec::new()
            })
            .push((e.timestamp, e.item_key.as_str()));
    }
    let mut sessions: Vec<RawSession> = order
        .into_iter()
        .map(|key| {
            let mut evs = groups.remove(key).unwrap_or_default();
            // stable: equal timestamps keep input order
            evs.sort_by_key(|(t, _)| *t);
            RawSession {
                key: key.to_string(),
                start_time: evs.first().map_or(0, |(t, _)| *t),
                items: evs.into_iter().map(|(_, item)| item.to_string()).collect(),
            }
        })
        .collect();
    sessions.sort_by_key(|s| s.start_time);
    sessions
}

/// Drops items seen fewer than `min_item_freq` times overall, then drops
/// sessions left shorter than `min_session_len`, repeating until nothing
/// changes. Every surviving item then has at least `min_item_freq`
/// occurrences in the output, and a second call is a no-op.
pub fn filter_dataset(
    sessions: &[RawSession],
    min_item_freq: usize,
    min_session_len: usize,
) -> Result<Vec<RawSession>> {
    let mut current = sessions.to_vec();
    loop {
        let (next, changed) = filter_pass(&current, min_item_freq, min_session_len);
        current = next;
        if !changed {
            break;
        }
    }
    if current.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(current)
}

fn filter_pass(
    sessions: &[RawSession],
    min_item_freq: usize,
    min_session_len: usize,
) -> (Vec<RawSession>, bool) {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in sessions {
        for item in &s.items {
            *freq.entry(item.as_str()).or_default() += 1;
        }
    }
    let mut changed = false;
    let kept = sessions
        .iter()
        .filter_map(|s| {
            let items: Vec<String> = s
                .items
                .iter()
                .filter(|i| freq[i.as_str()] >= min_item_freq)
                .cloned()
                .collect();
            changed |= items.len() != s.items.len();
            if items.len() < min_session_len {
                changed = true;
                return None;
            }
            Some(RawSession {
                key: s.key.clone(),
                items,
                start_time: s.start_time,
            })
        })
        .collect();
    (kept, changed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holdout {
    /// Latest fraction of sessions (by start time) become test.
    Fraction(f64),
    /// Sessions starting within this many time units of the latest start
    /// become test.
    Window(i64),
}

impl Default for Holdout {
    fn default() -> Self {
        Holdout::Fraction(0.1)
    }
}

/// Splits whole sessions by start time; the most recent go to test.
pub fn temporal_split(
    sessions: &[RawSession],
    holdout: Holdout,
) -> Result<(Vec<RawSession>, Vec<RawSession>)> {
    let mut sorted = sessions.to_vec();
    sorted.sort_by_key(|s| s.start_time);
    if sorted.len() >= 2 && sorted.first().map(|s| s.start_time) == sorted.last().map(|s| s.start_time) {
        log::warn!("all sessions share one start time; splitting by input order");
    }
    let n_test = match holdout {
        Holdout::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!(
                    "holdout fraction must be in (0, 1), got {f}"
                )));
            }
            if sorted.is_empty() {
                0
            } else {
                let raw = (sorted.len() as f64 * f).round() as usize;
                raw.clamp(1.min(sorted.len() - 1), sorted.len().saturating_sub(1))
            }
        }
        Holdout::Window(span) => {
            if span < 0 {
                return Err(Error::Config(format!(
                    "holdout window must be nonnegative, got {span}"
                )));
            }
            match sorted.last() {
                Some(last) => {
                    let cutoff = last.start_time - span;
                    sorted.iter().filter(|s| s.start_time >= cutoff).count()
                }
                None => 0,
            }
        }
    };
    let test = sorted.split_off(sorted.len() - n_test);
    Ok((sorted, test))
}

/// Bijection between item keys and dense indices `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(keys: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if index.insert(k.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary key {k:?}")));
            }
        }
        Ok(Self { keys, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.keys
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn key_of(&self, index: usize) -> Option<&str> {
        self.keys.get(index).map(String::as_str)
    }

    fn insert(&mut self, key: &str) -> usize {
        if let Some(&i) = self.index.get(key) {
            return i;
        }
        let i = self.keys.len();
        self.keys.push(key.to_string());
        self.index.insert(key.to_string(), i);
        i
    }

    /// SHA-256 over the keys in index order, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for k in &self.keys {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Indices assigned in first-appearance order over the training stream.
pub fn build_vocab(train: &[RawSession]) -> Vocab {
    let mut vocab = Vocab {
        keys: Vec::new(),
        index: HashMap::new(),
    };
    for s in train {
        for item in &s.items {
            vocab.insert(item);
        }
    }
    vocab
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub items: Vec<usize>,
    pub start_time: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub prefix: Vec<usize>,
    pub target: usize,
}

/// Emits `(items[..t], items[t])` for every `t` in `min_prefix_len..m`.
pub fn augment(items: &[usize], min_prefix_len: usize) -> Vec<TrainExample> {
    let start = min_prefix_len.max(1);
    (start..items.len())
        .map(|t| TrainExample {
            prefix: items[..t].to_vec(),
            target: items[t],
        })
        .collect()
}

/// Maps keys to indices, dropping unknown items, then re-applies the
/// session length floor.
pub fn index_sessions(
    sessions: &[RawSession],
    vocab: &Vocab,
    min_session_len: usize,
) -> Vec<Session> {
    sessions
        .iter()
        .filter_map(|s| {
            let items: Vec<usize> = s.items.iter().filter_map(|k| vocab.index_of(k)).collect();
            (items.len() >= min_session_len).then_some(Session {
                items,
                start_time: s.start_time,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub min_item_freq: usize,
    pub min_session_len: usize,
    pub holdout: Holdout,
    pub min_prefix_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_item_freq: 5,
            min_session_len: 2,
            holdout: Holdout::default(),
            min_prefix_len: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub items: usize,
    /// Mean length over train and test sessions after filtering.
    pub mean_length: f64,
}

/// Edge list of a built graph, stored alongside the data it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSection {
    pub epsilon: usize,
    pub include_test: bool,
    pub graph: GlobalGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub format_version: u32,
    pub preprocess: PreprocessConfig,
    pub vocab: Vocab,
    pub sessions_train: Vec<Session>,
    pub sessions_test: Vec<Session>,
    pub train: Vec<TrainExample>,
    pub test: Vec<TrainExample>,
    pub stats: DatasetStats,
    #[serde(default)]
    pub graph: Option<GraphSection>,
}

impl DatasetBundle {
    pub fn n_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Data(format!("serializing bundle: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        if version != Some(BUNDLE_FORMAT_VERSION as u64) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "bundle format version {version:?}, expected {BUNDLE_FORMAT_VERSION}"
                ),
            });
        }
        let bundle: DatasetBundle =
            serde_json::from_value(value).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        bundle.validate().map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })?;
        Ok(bundle)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let n = self.n_items();
        let sessions = self.sessions_train.iter().chain(&self.sessions_test);
        for s in sessions {
            if let Some(&bad) = s.items.iter().find(|&&i| i >= n) {
                return Err(format!("session item {bad} outside vocabulary of {n}"));
            }
        }
        for ex in self.train.iter().chain(&self.test) {
            if ex.prefix.is_empty() || ex.target >= n || ex.prefix.iter().any(|&i| i >= n) {
                return Err("example outside vocabulary or with empty prefix".into());
            }
        }
        Ok(())
    }

    /// Item occurrence counts over training sessions.
    pub fn train_item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_items()];
        for s in &self.sessions_train {
            for &i in &s.items {
                counts[i] += 1;
            }
        }
        counts
    }
}

/// Full pipeline from parsed events to a bundle (without a graph).
pub fn preprocess(events: &[RawEvent], config: &PreprocessConfig) -> Result<DatasetBundle> {
    let sessions = build_sessions(events);
    let filtered = filter_dataset(&sessions, config.min_item_freq, config.min_session_len)?;
    let (train_raw, test_raw) = temporal_split(&filtered, config.holdout)?;
    if train_raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab = build_vocab(&train_raw);
    let sessions_train = index_sessions(&train_raw, &vocab, config.min_session_len);
    let sessions_test = index_sessions(&test_raw, &vocab, config.min_session_len);
    let train: Vec<TrainExample> = sessions_train
        .iter()
        .flat_map(|s| augment(&s.items, config.min_prefix_len))
        .collect();
    let test: Vec<TrainExample> = sessions_test
        .iter()
        .flat_map(|s| augment(&s.items, config.min_prefix_len))
        .collect();
    let total_len: usize = sessions_train
        .iter()
        .chain(&sessions_test)
        .map(|s| s.items.len())
        .sum();
    let n_sessions = sessions_train.len() + sessions_test.len();
    let stats = DatasetStats {
        train_sessions: sessions_train.len(),
        test_sessions: sessions_test.len(),
        train_examples: train.len(),
        test_examples: test.len(),
        items: vocab.len(),
        mean_length: total_len as f64 / n_sessions.max(1) as f64,
    };
    Ok(DatasetBundle {
        format_version: BUNDLE_FORMAT_VERSION,
        preprocess: config.clone(),
        vocab,
        sessions_train,
        sessions_test,
        train,
        test,
        stats,
        graph: None,
    })
}
