//! The live control plane: a versioned switch set published through a shared
//! memory file, a cached reader for the hot path, and the agent that syncs the
//! collector's per-host config into the file.

pub mod agent;
mod shm;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::metrics::{epoch_us, Clock, MonotonicClock};

pub use shm::{decode_control, encode_control, read_control, write_control, HEADER_LEN, MAGIC};

pub const FORMAT_VERSION: u32 = 1;
/// `enabled_metrics` entry that enables every metric.
pub const ALL_METRICS: &str = "*";
pub const DEFAULT_POLL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Override {
    On,
    Off,
    #[default]
    Inherit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlBlock {
    pub version: u32,
    pub seq: u64,
    pub global_enabled: bool,
    pub enabled_metrics: BTreeSet<String>,
    pub target_overrides: BTreeMap<String, Override>,
    pub concise_threshold_us: i64,
    pub sample_rate: f64,
}

impl Default for ControlBlock {
    fn default() -> Self {
        ControlBlock {
            version: FORMAT_VERSION,
            seq: 0,
            global_enabled: true,
            enabled_metrics: BTreeSet::from([ALL_METRICS.to_string()]),
            target_overrides: BTreeMap::new(),
            concise_threshold_us: 0,
            sample_rate: 1.0,
        }
    }
}

impl ControlBlock {
    /// Names of the fields whose invariants do not hold.
    pub fn violations(&self) -> Vec<&'static str> {
        let mut bad = Vec::new();
        if self.version != FORMAT_VERSION {
            bad.push("version");
        }
        if !(0.0..=1.0).contains(&self.sample_rate) {
            bad.push("sample_rate");
        }
        if self.concise_threshold_us < 0 {
            bad.push("concise_threshold_us");
        }
        bad
    }

    pub fn validate(&self) -> Result<(), Vec<&'static str>> {
        let bad = self.violations();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }

    pub fn metric_enabled(&self, metric: &str) -> bool {
        self.enabled_metrics.contains(ALL_METRICS) || self.enabled_metrics.contains(metric)
    }

    /// Equality ignoring `seq`.
    pub fn same_payload(&self, other: &ControlBlock) -> bool {
        ControlBlock { seq: 0, ..self.clone() }
            == ControlBlock {
                seq: 0,
                ..other.clone()
            }
    }
}

/// Whether a call of `target` should be traced for `metric`, root sampling
/// aside.
pub fn effective_state(block: &ControlBlock, target: &str, metric: &str) -> bool {
    if !block.global_enabled || !block.metric_enabled(metric) {
        return false;
    }
    match block.target_overrides.get(target).copied().unwrap_or_default() {
        Override::On | Override::Inherit => true,
        Override::Off => false,
    }
}

/// Root-call sampling decision for a uniform `draw` in `[0, 1)`. Calls nested
/// under a root inherit the root's decision.
pub fn sample_root(block: &ControlBlock, draw: f64) -> bool {
    if block.sample_rate >= 1.0 {
        true
    } else if block.sample_rate <= 0.0 {
        false
    } else {
        draw < block.sample_rate
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error("control block {0} not found")]
    NotFound(PathBuf),
    #[error("control block I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt control block: {0}")]
    Decode(String),
    #[error("control block is being rewritten; no stable read after {0} attempts")]
    Unstable(usize),
    #[error("invalid control block fields: {0:?}")]
    Invalid(Vec<&'static str>),
}

/// A snapshot plus when it was taken.
#[derive(Debug, Clone)]
pub struct ControlView {
    pub snapshot: Arc<ControlBlock>,
    pub fetched_at_us: u64,
    pub poll_interval_us: u64,
}

/// Default location of the control block: a tmpfs-backed path when one exists.
pub fn default_control_path() -> PathBuf {
    let shm = Path::new("/dev/shm");
    if shm.is_dir() {
        shm.join("hiq-control")
    } else {
        std::env::temp_dir().join("hiq-control")
    }
}

/// Cached reader over a control block file. `snapshot` costs a timestamp
/// comparison unless the poll interval has elapsed.
pub struct ControlReader {
    path: Option<PathBuf>,
    poll_ns: u64,
    view: RwLock<ControlView>,
    next_refresh_ns: AtomicU64,
    refreshing: AtomicBool,
}

impl ControlReader {
    pub fn open(path: impl Into<PathBuf>, poll: Duration) -> Self {
        let reader = ControlReader {
            path: Some(path.into()),
            poll_ns: poll.as_nanos() as u64,
            view: RwLock::new(ControlView {
                snapshot: Arc::new(ControlBlock::default()),
                fetched_at_us: 0,
                poll_interval_us: poll.as_micros() as u64,
            }),
            next_refresh_ns: AtomicU64::new(0),
            refreshing: AtomicBool::new(false),
        };
        reader.refresh();
        reader
    }

    /// A reader that always returns `block`.
    pub fn fixed(block: ControlBlock) -> Self {
        ControlReader {
            path: None,
            poll_ns: u64::MAX,
            view: RwLock::new(ControlView {
                snapshot: Arc::new(block),
                fetched_at_us: epoch_us(),
                poll_interval_us: 0,
            }),
            next_refresh_ns: AtomicU64::new(u64::MAX),
            refreshing: AtomicBool::new(false),
        }
    }

    /// Reads `HIQ_CTRL_PATH` and `HIQ_CTRL_POLL_MS`; no path means defaults.
    pub fn from_env() -> Self {
        match std::env::var_os("HIQ_CTRL_PATH") {
            Some(path) => ControlReader::open(path, poll_from_env()),
            None => ControlReader::fixed(ControlBlock::default()),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    #[inline]
    pub fn snapshot(&self) -> Arc<ControlBlock> {
        let now = MonotonicClock.now_ns();
        if now >= self.next_refresh_ns.load(Ordering::Relaxed) && !self.refreshing.swap(true, Ordering::Acquire) {
            self.refresh();
            self.refreshing.store(false, Ordering::Release);
        }
        self.view.read().unwrap().snapshot.clone()
    }

    pub fn view(&self) -> ControlView {
        self.view.read().unwrap().clone()
    }

    /// Re-reads the file now. A missing file means defaults; a corrupt one
    /// keeps the last good snapshot.
    pub fn refresh(&self) {
        let Some(path) = &self.path else { return };
        let next = match read_control(path) {
            Ok(block) => Some(block),
            Err(ControlError::NotFound(_)) => Some(ControlBlock::default()),
            Err(e) => {
                tracing::warn!(error = %e, "keeping last good control snapshot");
                None
            }
        };
        if let Some(block) = next {
            let mut view = self.view.write().unwrap();
            if *view.snapshot != block {
                view.snapshot = Arc::new(block);
            }
            view.fetched_at_us = epoch_us();
        }
        self.next_refresh_ns
            .store(MonotonicClock.now_ns().saturating_add(self.poll_ns), Ordering::Relaxed);
    }
}

/// `HIQ_CTRL_POLL_MS`, or the default poll interval.
pub fn poll_from_env() -> Duration {
    std::env::var("HIQ_CTRL_POLL_MS")
        .ok()
        .and_then(|v| v.parse::<u64>().ok())
        .map(Duration::from_millis)
        .unwrap_or(DEFAULT_POLL)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block() -> ControlBlock {
        ControlBlock {
            enabled_metrics: BTreeSet::from(["latency".to_string()]),
            target_overrides: BTreeMap::from([("f2".to_string(), Override::Off), ("f3".to_string(), Override::On)]),
            ..ControlBlock::default()
        }
    }

    #[test]
    fn master_switch_wins() {
        let b = ControlBlock {
            global_enabled: false,
            ..block()
        };
        for t in ["f1", "f2", "f3"] {
            for m in ["latency", "memory"] {
                assert!(!effective_state(&b, t, m));
            }
        }
    }

    #[test]
    fn per_target_and_metric() {
        let b = block();
        assert!(effective_state(&b, "f1", "latency"));
        assert!(!effective_state(&b, "f2", "latency"));
        assert!(effective_state(&b, "f3", "latency"));
        assert!(!effective_state(&b, "f1", "memory"));
        let all = ControlBlock::default();
        assert!(effective_state(&all, "anything", "open_fds"));
    }

    #[test]
    fn sampling_boundaries() {
        let mut b = ControlBlock {
            sample_rate: 0.0,
            ..ControlBlock::default()
        };
        assert!((0..100).all(|i| !sample_root(&b, i as f64 / 100.0)));
        b.sample_rate = 1.0;
        assert!((0..100).all(|i| sample_root(&b, i as f64 / 100.0)));
        b.sample_rate = 0.25;
        assert!(sample_root(&b, 0.1));
        assert!(!sample_root(&b, 0.3));
    }

    #[test]
    fn validation_names_fields() {
        let mut b = ControlBlock::default();
        assert!(b.validate().is_ok());
        b.sample_rate = 1.5;
        b.concise_threshold_us = -1;
        assert_eq!(b.validate().unwrap_err(), vec!["sample_rate", "concise_threshold_us"]);
        b.sample_rate = f64::NAN;
        assert!(b.violations().contains(&"sample_rate"));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let b: ControlBlock = serde_json::from_str(r#"{"global_enabled": false}"#).unwrap();
        assert!(!b.global_enabled);
        assert_eq!(b.sample_rate, 1.0);
        assert!(b.metric_enabled("latency"));
        let b: ControlBlock = serde_json::from_str(r#"{"target_overrides": {"f2": "off", "f1": "inherit"}}"#).unwrap();
        assert_eq!(b.target_overrides["f2"], Override::Off);
    }

    #[test]
    fn reader_follows_file_and_keeps_last_good() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctrl");
        let reader = ControlReader::open(&path, Duration::from_millis(0));
        assert!(reader.snapshot().global_enabled, "missing file means defaults");

        let b = block();
        write_control(&path, &b).unwrap();
        let snap = reader.snapshot();
        assert_eq!(snap.seq, 1);
        assert!(!effective_state(&snap, "f2", "latency"));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert_eq!(reader.snapshot().seq, 1, "corrupt file keeps previous snapshot");
    }

    #[test]
    fn reader_caches_between_polls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctrl");
        let reader = ControlReader::open(&path, Duration::from_secs(3600));
        write_control(&path, &block()).unwrap();
        assert_eq!(reader.snapshot().seq, 0, "not yet due for refresh");
        reader.refresh();
        assert_eq!(reader.snapshot().seq, 1);
    }
}
