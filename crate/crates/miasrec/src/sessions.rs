//! Session log ingestion and preprocessing.
//!
//! Raw interaction rows become a filtered, vocabulary-mapped corpus, split
//! chronologically 8:1:1, then expanded into (prefix, target) examples under
//! the iterative revealing scheme. Item indices are dense and 1-based.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_MAX_LEN: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRow {
    pub session_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default)]
pub struct EventLog {
    pub rows: Vec<EventRow>,
}

/// Which column holds a field: by header name or by zero-based index.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogFormat {
    pub delimiter: char,
    pub has_header: bool,
    pub session_col: ColumnRef,
    pub item_col: ColumnRef,
    pub time_col: ColumnRef,
}

impl Default for LogFormat {
    fn default() -> Self {
        LogFormat {
            delimiter: '\t',
            has_header: false,
            session_col: ColumnRef::Index(0),
            item_col: ColumnRef::Index(1),
            time_col: ColumnRef::Index(2),
        }
    }
}

impl LogFormat {
    fn resolve(&self, col: &ColumnRef, header: Option<&[String]>, line: usize) -> Result<usize> {
        match col {
            ColumnRef::Index(i) => Ok(*i),
            ColumnRef::Name(name) => header
                .and_then(|h| h.iter().position(|c| c == name))
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("column {name:?} not found in header"),
                }),
        }
    }
}

/// Parse an integer epoch-seconds timestamp, or a date-only value mapped to
/// midnight UTC.
fn parse_timestamp(raw: &str, line: usize) -> Result<i64> {
    if let Ok(t) = raw.trim().parse::<i64>() {
        return Ok(t);
    }
    if let Ok(date) = chrono::NaiveDate::parse_from_str(raw.trim(), "%Y-%m-%d") {
        return Ok(date.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp());
    }
    Err(Error::Parse {
        line,
        message: format!("invalid timestamp {raw:?}"),
    })
}

pub fn load_events(path: &Path, format: &LogFormat) -> Result<EventLog> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    let mut header: Option<Vec<String>> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(format.delimiter).map(|s| s.to_string()).collect();
        if format.has_header && header.is_none() {
            header = Some(fields);
            continue;
        }
        let get = |col: &ColumnRef| -> Result<&str> {
            let i = format.resolve(col, header.as_deref(), line_no)?;
            fields.get(i).map(|s| s.as_str()).ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("missing column {i} (row has {} fields)", fields.len()),
            })
        };
        let session_id = get(&format.session_col)?.trim().to_string();
        let item_id = get(&format.item_col)?.trim().to_string();
        let timestamp = parse_timestamp(get(&format.time_col)?, line_no)?;
        if session_id.is_empty() || item_id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty session or item id".into(),
            });
        }
        rows.push(EventRow {
            session_id,
            item_id,
            timestamp,
        });
    }
    Ok(EventLog { rows })
}

/// Item index: dense, 1-based, valid range [1, n].
pub type ItemIndex = u32;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub items: Vec<ItemIndex>,
    pub end_time: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionCorpus {
    pub format_version: u32,
    /// vocabulary[i - 1] is the raw item id for index i
    pub vocabulary: Vec<String>,
    pub sessions: Vec<Session>,
    /// snapshot of the run configuration that produced this corpus
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_echo: Option<serde_json::Value>,
}

impl SessionCorpus {
    pub fn item_count(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.sessions.iter().map(|s| s.items.len()).sum()
    }

    pub fn average_length(&self) -> f64 {
        self.interaction_count() as f64 / self.sessions.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, self).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        writer.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<SessionCorpus> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let corpus: SessionCorpus =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Artifact {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        if corpus.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::Artifact {
                path: path.to_path_buf(),
                message: format!(
                    "unsupported corpus format version {} (expected {})",
                    corpus.format_version, CORPUS_FORMAT_VERSION
                ),
            });
        }
        Ok(corpus)
    }
}

/// Filter a raw log into a corpus: drop items with global support below
/// `min_item_support`, then sessions shorter than `min_session_len`. Single
/// pass, no fixed-point iteration. Sessions are ordered by end timestamp,
/// ties broken by session id.
pub fn preprocess(
    log: &EventLog,
    min_item_support: usize,
    min_session_len: usize,
) -> Result<SessionCorpus> {
    if log.rows.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    // group rows per session, keeping input order for equal timestamps
    let mut by_session: HashMap<&str, Vec<&EventRow>> = HashMap::new();
    for row in &log.rows {
        by_session.entry(&row.session_id).or_default().push(row);
    }
    for rows in by_session.values_mut() {
        rows.sort_by_key(|r| r.timestamp);
    }

    let mut item_counts: HashMap<&str, usize> = HashMap::new();
    for row in &log.rows {
        *item_counts.entry(&row.item_id).or_default() += 1;
    }

    let mut kept: Vec<(String, Vec<&str>, i64)> = Vec::new();
    for (sid, rows) in &by_session {
        let items: Vec<&str> = rows
            .iter()
            .map(|r| r.item_id.as_str())
            .filter(|it| item_counts[it] >= min_item_support)
            .collect();
        if items.len() >= min_session_len {
            let end_time = rows.last().unwrap().timestamp;
            kept.push((sid.to_string(), items, end_time));
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    kept.sort_by(|a, b| a.2.cmp(&b.2).then_with(|| a.0.cmp(&b.0)));

    // dense indices in order of first appearance over the sorted sessions
    let mut vocab_map: HashMap<String, ItemIndex> = HashMap::new();
    let mut vocabulary: Vec<String> = Vec::new();
    let mut sessions = Vec::with_capacity(kept.len());
    for (id, items, end_time) in kept {
        let indices: Vec<ItemIndex> = items
            .into_iter()
            .map(|it| {
                *vocab_map.entry(it.to_string()).or_insert_with(|| {
                    vocabulary.push(it.to_string());
                    vocabulary.len() as ItemIndex
                })
            })
            .collect();
        sessions.push(Session {
            id,
            items: indices,
            end_time,
        });
    }

    Ok(SessionCorpus {
        format_version: CORPUS_FORMAT_VERSION,
        vocabulary,
        sessions,
        config_echo: None,
    })
}

/// Split 8:1:1 by session count over the chronological order. Items unseen in
/// the train portion are removed from val/test sessions; sessions shrinking
/// below two items are dropped.
pub fn chronological_split(
    corpus: &SessionCorpus,
) -> Result<(SessionCorpus, SessionCorpus, SessionCorpus)> {
    let count = corpus.sessions.len();
    if count < 10 {
        return Err(Error::TooFewSessions { count });
    }
    let train_end = count * 8 / 10;
    let val_end = count * 9 / 10;

    let train_sessions: Vec<Session> = corpus.sessions[..train_end].to_vec();
    let mut seen = vec![false; corpus.item_count() + 1];
    for s in &train_sessions {
        for &it in &s.items {
            seen[it as usize] = true;
        }
    }
    let shrink = |slice: &[Session]| -> Vec<Session> {
        slice
            .iter()
            .filter_map(|s| {
                let items: Vec<ItemIndex> = s
                    .items
                    .iter()
                    .copied()
                    .filter(|&it| seen[it as usize])
                    .collect();
                (items.len() >= 2).then(|| Session {
                    id: s.id.clone(),
                    items,
                    end_time: s.end_time,
                })
            })
            .collect()
    };

    let make = |sessions: Vec<Session>| SessionCorpus {
        format_version: CORPUS_FORMAT_VERSION,
        vocabulary: corpus.vocabulary.clone(),
        sessions,
        config_echo: corpus.config_echo.clone(),
    };
    Ok((
        make(train_sessions),
        make(shrink(&corpus.sessions[train_end..val_end])),
        make(shrink(&corpus.sessions[val_end..])),
    ))
}

/// One (prefix, target) instance from the iterative revealing scheme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixExample {
    pub prefix: Vec<ItemIndex>,
    pub target: ItemIndex,
    /// reversed positions: last item has position 1
    pub positions: Vec<u32>,
    /// occurrence count of prefix[i] within the whole (truncated) prefix
    pub frequencies: Vec<u32>,
}

impl PrefixExample {
    pub fn from_prefix(prefix: &[ItemIndex], target: ItemIndex, max_len: usize) -> PrefixExample {
        let start = prefix.len().saturating_sub(max_len);
        let prefix = prefix[start..].to_vec();
        let len = prefix.len();
        let positions: Vec<u32> = (0..len).map(|i| (len - i) as u32).collect();
        let mut counts: HashMap<ItemIndex, u32> = HashMap::new();
        for &it in &prefix {
            *counts.entry(it).or_default() += 1;
        }
        let frequencies: Vec<u32> = prefix.iter().map(|it| counts[it]).collect();
        PrefixExample {
            prefix,
            target,
            positions,
            frequencies,
        }
    }
}

/// A session of length L yields L-1 examples: predict item i+1 from the first
/// i items, truncated to the most recent `max_len`.
pub fn expand_prefixes(corpus: &SessionCorpus, max_len: usize) -> Vec<PrefixExample> {
    let mut out = Vec::new();
    for session in &corpus.sessions {
        for i in 1..session.items.len() {
            out.push(PrefixExample::from_prefix(
                &session.items[..i],
                session.items[i],
                max_len,
            ));
        }
    }
    out
}
