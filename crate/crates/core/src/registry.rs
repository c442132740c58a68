//! The bounded tree map and the shipping pipeline behind it.
//!
//! Traced threads hand finished trees to [`TreeRegistry::put_tree`]. When the
//! map reaches its maximum size every entry is packed into a [`TreeBatch`] and
//! pushed onto a bounded queue without blocking; a single worker thread drains
//! the queue into the configured sinks.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use indexmap::IndexMap;
use serde::Serialize;

use crate::metrics::epoch_us;
use crate::tree::{render_tree, HiQTree, RenderFormat};

pub const DEFAULT_MAX_SIZE: usize = 64;
pub const DEFAULT_QUEUE_CAPACITY: usize = 16;
pub const DEFAULT_HTTP_BACKOFF: [Duration; 3] = [
    Duration::from_millis(200),
    Duration::from_millis(400),
    Duration::from_millis(800),
];

/// Receives finished trees from the interceptor.
pub trait TreeHandler: Send + Sync {
    fn handle(&self, tree: HiQTree);
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeBatch {
    pub batch_id: String,
    pub host: String,
    pub sent_at_us: u64,
    pub trees: Vec<HiQTree>,
}

#[derive(Debug)]
pub enum WorkerMsg {
    Batch(TreeBatch),
    Shutdown,
}

#[derive(Debug, Clone)]
pub struct RegistryConfig {
    pub max_size: usize,
    pub queue_capacity: usize,
    pub host: String,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            max_size: DEFAULT_MAX_SIZE,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            host: local_hostname(),
        }
    }
}

/// Name of this machine, used to label batches.
pub fn local_hostname() -> String {
    std::fs::read_to_string("/proc/sys/kernel/hostname")
        .ok()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "localhost".to_string())
}

type TreeKey = (String, String);

pub struct TreeRegistry {
    entries: Mutex<IndexMap<TreeKey, HiQTree>>,
    max_size: usize,
    host: String,
    queue: Sender<WorkerMsg>,
    trees_in: AtomicU64,
    flush_count: AtomicU64,
    dropped_count: AtomicU64,
}

impl TreeRegistry {
    pub fn new(cfg: RegistryConfig) -> (Arc<TreeRegistry>, Receiver<WorkerMsg>) {
        assert!(cfg.max_size > 0, "max_size must be positive");
        let (tx, rx) = bounded(cfg.queue_capacity);
        let reg = TreeRegistry {
            entries: Mutex::new(IndexMap::with_capacity(cfg.max_size)),
            max_size: cfg.max_size,
            host: cfg.host,
            queue: tx,
            trees_in: AtomicU64::new(0),
            flush_count: AtomicU64::new(0),
            dropped_count: AtomicU64::new(0),
        };
        (Arc::new(reg), rx)
    }

    /// Inserts `tree`; flushes the whole map when it reaches `max_size`.
    pub fn put_tree(&self, tree: HiQTree) {
        self.trees_in.fetch_add(1, Ordering::Relaxed);
        let full = {
            let mut entries = self.entries.lock().unwrap();
            entries.insert((tree.metric.name().to_string(), tree.tree_id.clone()), tree);
            if entries.len() >= self.max_size {
                Some(std::mem::take(&mut *entries))
            } else {
                None
            }
        };
        if let Some(entries) = full {
            self.enqueue(entries);
        }
    }

    /// Ships whatever is in the map now. Returns the number of trees taken.
    pub fn flush_now(&self) -> usize {
        let entries = std::mem::take(&mut *self.entries.lock().unwrap());
        let n = entries.len();
        if n > 0 {
            self.enqueue(entries);
        }
        n
    }

    fn enqueue(&self, entries: IndexMap<TreeKey, HiQTree>) {
        let batch = TreeBatch {
            batch_id: uuid::Uuid::new_v4().to_string(),
            host: self.host.clone(),
            sent_at_us: epoch_us(),
            trees: entries.into_values().collect(),
        };
        let n = batch.trees.len() as u64;
        self.flush_count.fetch_add(1, Ordering::Relaxed);
        match self.queue.try_send(WorkerMsg::Batch(batch)) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
                self.dropped_count.fetch_add(n, Ordering::Relaxed);
            }
        }
    }

    /// Sends the shutdown sentinel, waiting for queue space if necessary.
    pub fn close(&self) {
        let _ = self.queue.send(WorkerMsg::Shutdown);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn trees_in(&self) -> u64 {
        self.trees_in.load(Ordering::Relaxed)
    }

    pub fn flush_count(&self) -> u64 {
        self.flush_count.load(Ordering::Relaxed)
    }

    pub fn dropped_count(&self) -> u64 {
        self.dropped_count.load(Ordering::Relaxed)
    }
}

impl TreeHandler for TreeRegistry {
    fn handle(&self, tree: HiQTree) {
        self.put_tree(tree);
    }
}

/// Keeps every tree it is handed. Useful for tests and final rendering.
#[derive(Clone, Default)]
pub struct MemoryHandler(Arc<Mutex<Vec<HiQTree>>>);

impl MemoryHandler {
    pub fn new() -> Self {
        MemoryHandler::default()
    }

    pub fn trees(&self) -> Vec<HiQTree> {
        self.0.lock().unwrap().clone()
    }

    pub fn take(&self) -> Vec<HiQTree> {
        std::mem::take(&mut *self.0.lock().unwrap())
    }
}

impl TreeHandler for MemoryHandler {
    fn handle(&self, tree: HiQTree) {
        self.0.lock().unwrap().push(tree);
    }
}

/// Hands each tree to several handlers.
pub struct Tee(pub Vec<Arc<dyn TreeHandler>>);

impl TreeHandler for Tee {
    fn handle(&self, tree: HiQTree) {
        if let Some((last, rest)) = self.0.split_last() {
            for h in rest {
                h.handle(tree.clone());
            }
            last.handle(tree);
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SinkError {
    #[error("sink I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("collector rejected batch after {attempts} attempts: {last}")]
    Http { attempts: usize, last: String },
    #[error("invalid sink spec \"{0}\" (expected stdout, file:PATH or http:URL)")]
    BadSpec(String),
}

pub trait Sink: Send {
    fn name(&self) -> String;
    fn write_batch(&mut self, batch: &TreeBatch) -> Result<(), SinkError>;
}

/// Sink selection as written on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SinkSpec {
    Stdout,
    FileJsonl(PathBuf),
    CollectorHttp(String),
}

impl FromStr for SinkSpec {
    type Err = SinkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "stdout" {
            Ok(SinkSpec::Stdout)
        } else if let Some(path) = s.strip_prefix("file:").filter(|p| !p.is_empty()) {
            Ok(SinkSpec::FileJsonl(PathBuf::from(path)))
        } else if let Some(url) = s.strip_prefix("http:") {
            if url.starts_with("http://") || url.starts_with("https://") {
                Ok(SinkSpec::CollectorHttp(url.trim_end_matches('/').to_string()))
            } else {
                Err(SinkError::BadSpec(s.to_string()))
            }
        } else {
            Err(SinkError::BadSpec(s.to_string()))
        }
    }
}

impl SinkSpec {
    pub fn open(&self) -> Result<Box<dyn Sink>, SinkError> {
        Ok(match self {
            SinkSpec::Stdout => Box::new(StdoutSink::new(Box::new(std::io::stdout()), RenderFormat::Absolute)),
            SinkSpec::FileJsonl(path) => Box::new(JsonlFileSink::open(path.clone())?),
            SinkSpec::CollectorHttp(url) => Box::new(HttpSink::new(url)),
        })
    }
}

/// One wire tree per line.
pub struct JsonlFileSink {
    path: PathBuf,
    file: File,
}

impl JsonlFileSink {
    pub fn open(path: PathBuf) -> Result<Self, SinkError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(JsonlFileSink { path, file })
    }
}

impl Sink for JsonlFileSink {
    fn name(&self) -> String {
        format!("file:{}", self.path.display())
    }

    fn write_batch(&mut self, batch: &TreeBatch) -> Result<(), SinkError> {
        let mut buf = Vec::new();
        for tree in &batch.trees {
            serde_json::to_writer(&mut buf, tree).expect("tree serializes");
            buf.push(b'\n');
        }
        self.file.write_all(&buf)?;
        self.file.flush()?;
        Ok(())
    }
}

/// POSTs batches to `{collector}/v1/trees`, retrying with backoff.
pub struct HttpSink {
    url: String,
    http: ureq::Agent,
    backoff: Vec<Duration>,
}

impl HttpSink {
    pub fn new(collector: &str) -> Self {
        let http = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(10)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpSink {
            url: format!("{}/v1/trees", collector.trim_end_matches('/')),
            http,
            backoff: DEFAULT_HTTP_BACKOFF.to_vec(),
        }
    }

    /// Replaces the retry schedule; one retry per entry.
    pub fn with_backoff(mut self, backoff: Vec<Duration>) -> Self {
        self.backoff = backoff;
        self
    }

    fn post(&self, body: &[u8]) -> Result<(), String> {
        match self
            .http
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
        {
            Ok(resp) if resp.status().is_success() => Ok(()),
            Ok(resp) => Err(format!("HTTP {}", resp.status().as_u16())),
            Err(e) => Err(e.to_string()),
        }
    }
}

impl Sink for HttpSink {
    fn name(&self) -> String {
        format!("http:{}", self.url)
    }

    fn write_batch(&mut self, batch: &TreeBatch) -> Result<(), SinkError> {
        let body = serde_json::to_vec(batch).expect("batch serializes");
        let mut last = String::new();
        let attempts = self.backoff.len() + 1;
        for attempt in 0..attempts {
            match self.post(&body) {
                Ok(()) => return Ok(()),
                Err(e) => last = e,
            }
            if let Some(delay) = self.backoff.get(attempt) {
                tracing::debug!(attempt, error = %last, "retrying batch post");
                std::thread::sleep(*delay);
            }
        }
        Err(SinkError::Http { attempts, last })
    }
}

/// Renders each tree as text.
pub struct StdoutSink {
    out: Box<dyn Write + Send>,
    format: RenderFormat,
}

impl StdoutSink {
    pub fn new(out: Box<dyn Write + Send>, format: RenderFormat) -> Self {
        StdoutSink { out, format }
    }
}

impl Sink for StdoutSink {
    fn name(&self) -> String {
        "stdout".to_string()
    }

    fn write_batch(&mut self, batch: &TreeBatch) -> Result<(), SinkError> {
        for tree in &batch.trees {
            self.out.write_all(render_tree(tree, self.format).as_bytes())?;
        }
        self.out.flush()?;
        Ok(())
    }
}

/// Collects shipped batches in memory.
#[derive(Clone, Default)]
pub struct MemorySink(Arc<Mutex<Vec<TreeBatch>>>);

impl MemorySink {
    pub fn new() -> Self {
        MemorySink::default()
    }

    pub fn batches(&self) -> Vec<TreeBatch> {
        self.0.lock().unwrap().clone()
    }

    pub fn tree_count(&self) -> usize {
        self.0.lock().unwrap().iter().map(|b| b.trees.len()).sum()
    }
}

impl Sink for MemorySink {
    fn name(&self) -> String {
        "memory".to_string()
    }

    fn write_batch(&mut self, batch: &TreeBatch) -> Result<(), SinkError> {
        self.0.lock().unwrap().push(batch.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SinkReport {
    pub name: String,
    pub batches_written: u64,
    pub trees_written: u64,
    pub failures: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkerReport {
    pub batches: u64,
    pub trees: u64,
    pub sinks: Vec<SinkReport>,
}

pub struct Worker {
    handle: JoinHandle<WorkerReport>,
}

impl Worker {
    /// Starts the single consumer of `queue`.
    pub fn spawn(queue: Receiver<WorkerMsg>, sinks: Vec<Box<dyn Sink>>) -> Worker {
        let handle = std::thread::Builder::new()
            .name("hiq-flush".to_string())
            .spawn(move || drain(queue, sinks))
            .expect("spawn flush worker");
        Worker { handle }
    }

    pub fn join(self) -> WorkerReport {
        self.handle.join().expect("flush worker panicked")
    }
}

fn drain(queue: Receiver<WorkerMsg>, mut sinks: Vec<Box<dyn Sink>>) -> WorkerReport {
    let mut report = WorkerReport {
        sinks: sinks
            .iter()
            .map(|s| SinkReport {
                name: s.name(),
                ..SinkReport::default()
            })
            .collect(),
        ..WorkerReport::default()
    };
    let mut ship = |batch: TreeBatch, report: &mut WorkerReport| {
        report.batches += 1;
        report.trees += batch.trees.len() as u64;
        for (sink, stats) in sinks.iter_mut().zip(report.sinks.iter_mut()) {
            match sink.write_batch(&batch) {
                Ok(()) => {
                    stats.batches_written += 1;
                    stats.trees_written += batch.trees.len() as u64;
                }
                Err(e) => {
                    stats.failures += 1;
                    tracing::warn!(sink = %stats.name, batch = %batch.batch_id, error = %e, failures = stats.failures, "sink write failed");
                }
            }
        }
    };
    for msg in queue.iter() {
        match msg {
            WorkerMsg::Batch(batch) => ship(batch, &mut report),
            WorkerMsg::Shutdown => break,
        }
    }
    while let Ok(WorkerMsg::Batch(batch)) = queue.try_recv() {
        ship(batch, &mut report);
    }
    report
}

/// A registry plus its running worker.
pub struct Pipeline {
    registry: Arc<TreeRegistry>,
    worker: Worker,
}

impl Pipeline {
    pub fn start(cfg: RegistryConfig, sinks: Vec<Box<dyn Sink>>) -> Pipeline {
        let (registry, queue) = TreeRegistry::new(cfg);
        let worker = Worker::spawn(queue, sinks);
        Pipeline { registry, worker }
    }

    pub fn registry(&self) -> Arc<TreeRegistry> {
        self.registry.clone()
    }

    /// Flushes the remainder, stops the worker after it drains, and returns
    /// its report.
    pub fn shutdown(self) -> WorkerReport {
        self.registry.flush_now();
        self.registry.close();
        self.worker.join()
    }
}
