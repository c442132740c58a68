//! In-memory store backed by an append-only JSONL log.
//!
//! Every accepted tree, span and config update is appended as one tagged
//! record. Opening a store replays the log; a torn final line (crash during
//! append) is cut off and the rest is kept.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use hiq_core::control::ControlBlock;
use hiq_core::metrics::epoch_us;
use hiq_core::tree::{
    format_percent, reconstruct_service_tree, tree_to_wire_value, wire_value_to_tree, ReconstructError, ServiceTree,
    SpanRecord,
};
use hiq_core::HiQTree;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt log record at {path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogRecord {
    Tree {
        host: String,
        received_at_us: u64,
        tree: Value,
    },
    Span {
        received_at_us: u64,
        span: SpanRecord,
    },
    Config {
        host: String,
        revision: u64,
        block: ControlBlock,
    },
}

#[derive(Debug, Clone)]
pub struct StoredTree {
    pub tree: HiQTree,
    pub host: String,
    pub received_at_us: u64,
}

/// One row of `GET /v1/trees`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub tree_id: String,
    pub host: String,
    pub metric: String,
    pub unit: String,
    pub root_name: String,
    pub root_span: f64,
    pub overhead_us: u64,
    /// `None` when the root span is zero or unknown.
    pub overhead_percent: Option<f64>,
    /// Display form, e.g. `"0.004%"` or `"n/a"`.
    pub overhead: String,
    pub created_at_us: u64,
    pub received_at_us: u64,
}

impl TreeSummary {
    fn of(stored: &StoredTree) -> Self {
        let t = &stored.tree;
        let pct = t.overhead_percent().ok();
        TreeSummary {
            tree_id: t.tree_id.clone(),
            host: stored.host.clone(),
            metric: t.metric.name().to_string(),
            unit: t.metric.unit().to_string(),
            root_name: t.root.name.clone(),
            root_span: t.root_span(),
            overhead_us: t.overhead_us,
            overhead_percent: pct,
            overhead: pct
                .map(|p| format!("{}%", format_percent(p)))
                .unwrap_or_else(|| "n/a".into()),
            created_at_us: t.created_at_us,
            received_at_us: stored.received_at_us,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TreeFilter {
    pub host: Option<String>,
    pub metric: Option<String>,
    /// Only trees created at or after this epoch time.
    pub since_us: Option<u64>,
    pub limit: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ingest {
    Stored,
    Duplicate,
}

#[derive(Default)]
struct State {
    trees: IndexMap<String, StoredTree>,
    spans: HashMap<String, IndexMap<String, SpanRecord>>,
    configs: HashMap<String, ControlBlock>,
    revision: u64,
}

impl State {
    fn apply(&mut self, record: LogRecord) -> Result<(), String> {
        match record {
            LogRecord::Tree {
                host,
                received_at_us,
                tree,
            } => {
                let tree = wire_value_to_tree(&tree).map_err(|e| e.to_string())?;
                self.trees.entry(tree.tree_id.clone()).or_insert(StoredTree {
                    tree,
                    host,
                    received_at_us,
                });
            }
            LogRecord::Span { span, .. } => {
                self.spans
                    .entry(span.trace_id.clone())
                    .or_default()
                    .entry(span.span_id.clone())
                    .or_insert(span);
            }
            LogRecord::Config { host, revision, block } => {
                self.configs.insert(host, block);
                self.revision = self.revision.max(revision);
            }
        }
        Ok(())
    }
}

struct Inner {
    state: State,
    log: Option<BufWriter<File>>,
}

/// Thread-safe store. All mutations hold one lock, so the log order matches
/// the in-memory order.
pub struct Store {
    inner: Mutex<Inner>,
    log_path: Option<PathBuf>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Store {
    /// A store that keeps nothing on disk.
    pub fn in_memory() -> Self {
        Store {
            inner: Mutex::new(Inner {
                state: State::default(),
                log: None,
            }),
            log_path: None,
        }
    }

    /// Opens (or creates) the store under `dir`, replaying its log.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(LOG_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io(&path))?;

        let mut state = State::default();
        let mut good_len = 0u64;
        let mut reader = BufReader::new(&file);
        let mut line = String::new();
        let mut lineno = 0;
        let mut needs_newline = false;
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io(&path))?;
            if n == 0 {
                break;
            }
            lineno += 1;
            let complete = line.ends_with('\n');
            let parsed = serde_json::from_str::<LogRecord>(line.trim_end())
                .map_err(|e| e.to_string())
                .and_then(|r| state.apply(r));
            match (parsed, complete) {
                (Ok(()), _) => good_len += n as u64,
                (Err(_), false) => {
                    tracing::warn!(line = lineno, "dropping torn final log record");
                    break;
                }
                (Err(reason), true) => {
                    return Err(StoreError::Corrupt {
                        path,
                        line: lineno,
                        reason,
                    })
                }
            }
            if !complete {
                needs_newline = true;
            }
        }
        drop(reader);
        if file.metadata().map_err(io(&path))?.len() != good_len {
            file.set_len(good_len).map_err(io(&path))?;
            file.seek(SeekFrom::End(0)).map_err(io(&path))?;
        }
        if needs_newline {
            // The last record parsed but its newline never made it to disk.
            file.write_all(b"\n").map_err(io(&path))?;
        }
        tracing::info!(
            trees = state.trees.len(),
            traces = state.spans.len(),
            revision = state.revision,
            "replayed {}",
            path.display()
        );
        Ok(Store {
            inner: Mutex::new(Inner {
                state,
                log: Some(BufWriter::new(file)),
            }),
            log_path: Some(path),
        })
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    fn append(&self, log: &mut Option<BufWriter<File>>, records: &[LogRecord]) -> Result<(), StoreError> {
        let Some(w) = log else { return Ok(()) };
        let path = self.log_path.as_deref().unwrap_or(Path::new(LOG_FILE));
        for r in records {
            serde_json::to_writer(&mut *w, r).map_err(|e| io(path)(e.into()))?;
            w.write_all(b"\n").map_err(io(path))?;
        }
        w.flush().map_err(io(path))
    }

    pub fn ingest_tree(&self, host: &str, tree: HiQTree) -> Result<Ingest, StoreError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.state.trees.contains_key(&tree.tree_id) {
            return Ok(Ingest::Duplicate);
        }
        let received_at_us = epoch_us();
        let record = LogRecord::Tree {
            host: host.to_string(),
            received_at_us,
            tree: tree_to_wire_value(&tree),
        };
        let Inner { state, log } = &mut *inner;
        self.append(log, &[record])?;
        state.trees.insert(
            tree.tree_id.clone(),
            StoredTree {
                tree,
                host: host.to_string(),
                received_at_us,
            },
        );
        Ok(Ingest::Stored)
    }

    /// Stores spans not seen before (keyed by trace and span id); returns how
    /// many were new.
    pub fn ingest_spans(&self, spans: Vec<SpanRecord>) -> Result<usize, StoreError> {
        let mut inner = self.inner.lock().unwrap();
        let Inner { state, log } = &mut *inner;
        let received_at_us = epoch_us();
        let mut fresh = Vec::new();
        for span in spans {
            let known = state
                .spans
                .get(&span.trace_id)
                .is_some_and(|t| t.contains_key(&span.span_id));
            let repeated = fresh.iter().any(|r| match r {
                LogRecord::Span { span: s, .. } => s.trace_id == span.trace_id && s.span_id == span.span_id,
                _ => false,
            });
            if !known && !repeated {
                fresh.push(LogRecord::Span { received_at_us, span });
            }
        }
        self.append(log, &fresh)?;
        let n = fresh.len();
        for r in fresh {
            state.apply(r).expect("span records always apply");
        }
        Ok(n)
    }

    pub fn tree_count(&self) -> usize {
        self.inner.lock().unwrap().state.trees.len()
    }

    /// Tree ids in arrival order.
    pub fn tree_ids(&self) -> Vec<String> {
        self.inner.lock().unwrap().state.trees.keys().cloned().collect()
    }

    pub fn get_tree(&self, tree_id: &str) -> Option<StoredTree> {
        self.inner.lock().unwrap().state.trees.get(tree_id).cloned()
    }

    /// Newest-first summaries matching `filter`.
    pub fn list_trees(&self, filter: &TreeFilter) -> Vec<TreeSummary> {
        let inner = self.inner.lock().unwrap();
        inner
            .state
            .trees
            .values()
            .rev()
            .filter(|s| filter.host.as_deref().is_none_or(|h| s.host == h))
            .filter(|s| filter.metric.as_deref().is_none_or(|m| s.tree.metric.name() == m))
            .filter(|s| filter.since_us.is_none_or(|t| s.tree.created_at_us >= t))
            .take(filter.limit)
            .map(TreeSummary::of)
            .collect()
    }

    /// Service tree built from the stored spans of `trace_id`; `None` if no
    /// span of that trace was stored.
    pub fn trace(&self, trace_id: &str) -> Option<Result<ServiceTree, ReconstructError>> {
        let spans: Vec<SpanRecord> = {
            let inner = self.inner.lock().unwrap();
            inner.state.spans.get(trace_id)?.values().cloned().collect()
        };
        Some(reconstruct_service_tree(&spans))
    }

    /// The host's block (defaults if never set) and the current revision.
    pub fn get_config(&self, host: &str) -> (u64, ControlBlock) {
        let inner = self.inner.lock().unwrap();
        let block = inner.state.configs.get(host).cloned().unwrap_or_default();
        (inner.state.revision, block)
    }

    /// Validates, stores and persists `block` for `host` under a new revision.
    pub fn put_config(
        &self,
        host: &str,
        mut block: ControlBlock,
    ) -> Result<Result<u64, Vec<&'static str>>, StoreError> {
        if let Err(violations) = block.validate() {
            return Ok(Err(violations));
        }
        block.seq = 0;
        let mut inner = self.inner.lock().unwrap();
        let Inner { state, log } = &mut *inner;
        let revision = state.revision + 1;
        let record = LogRecord::Config {
            host: host.to_string(),
            revision,
            block,
        };
        self.append(log, std::slice::from_ref(&record))?;
        state.apply(record).expect("config records always apply");
        Ok(Ok(revision))
    }

    pub fn revision(&self) -> u64 {
        self.inner.lock().unwrap().state.revision
    }
}
