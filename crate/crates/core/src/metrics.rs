//! Metric samplers. Every tree is built from paired before/after samples of
//! exactly one metric.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, RwLock};
use std::time::Instant;

/// Source of monotonic time in nanoseconds. Wrapper overhead is measured with
/// one of these; tests inject a deterministic implementation.
pub trait Clock: Send + Sync {
    fn now_ns(&self) -> u64;
}

fn process_epoch() -> Instant {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    *EPOCH.get_or_init(Instant::now)
}

/// The process monotonic clock.
#[derive(Debug, Default, Clone, Copy)]
pub struct MonotonicClock;

impl Clock for MonotonicClock {
    #[inline]
    fn now_ns(&self) -> u64 {
        process_epoch().elapsed().as_nanos() as u64
    }
}

/// Deterministic clock: every read advances time by `step_ns`, and callers can
/// advance it explicitly to simulate work.
#[derive(Debug)]
pub struct StepClock {
    now: AtomicU64,
    step_ns: u64,
}

impl StepClock {
    pub fn new(start_ns: u64, step_ns: u64) -> Self {
        StepClock {
            now: AtomicU64::new(start_ns),
            step_ns,
        }
    }

    pub fn advance(&self, ns: u64) {
        self.now.fetch_add(ns, Ordering::SeqCst);
    }

    pub fn peek(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

impl Clock for StepClock {
    fn now_ns(&self) -> u64 {
        self.now.fetch_add(self.step_ns, Ordering::SeqCst) + self.step_ns
    }
}

/// Wall-clock time in epoch microseconds.
pub fn epoch_us() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricKind {
    Latency,
    MemoryRss,
    DiskIo,
    Custom { name: String, unit: String },
}

impl MetricKind {
    /// The name used on the command line and in the wire format.
    pub fn name(&self) -> &str {
        match self {
            MetricKind::Latency => "latency",
            MetricKind::MemoryRss => "memory",
            MetricKind::DiskIo => "disk_io",
            MetricKind::Custom { name, .. } => name,
        }
    }

    pub fn unit(&self) -> &str {
        match self {
            MetricKind::Latency => "us",
            MetricKind::MemoryRss | MetricKind::DiskIo => "B",
            MetricKind::Custom { unit, .. } => unit,
        }
    }

    pub fn builtin(name: &str) -> Option<MetricKind> {
        match name {
            "latency" => Some(MetricKind::Latency),
            "memory" | "memory_rss" => Some(MetricKind::MemoryRss),
            "disk_io" => Some(MetricKind::DiskIo),
            _ => None,
        }
    }

    /// Rebuilds a kind from its wire `(metric, unit)` pair.
    pub fn from_wire(name: &str, unit: &str) -> MetricKind {
        match MetricKind::builtin(name) {
            Some(kind) if kind.unit() == unit => kind,
            _ => MetricKind::Custom {
                name: name.to_string(),
                unit: unit.to_string(),
            },
        }
    }

    pub fn is_latency(&self) -> bool {
        matches!(self, MetricKind::Latency)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

type Sampler = dyn Fn() -> f64 + Send + Sync;

#[derive(Clone)]
pub struct MetricProvider {
    kind: MetricKind,
    description: String,
    sampler: Arc<Sampler>,
}

impl fmt::Debug for MetricProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricProvider")
            .field("kind", &self.kind)
            .field("description", &self.description)
            .finish()
    }
}

impl MetricProvider {
    pub fn new<F>(kind: MetricKind, description: &str, sampler: F) -> Self
    where
        F: Fn() -> f64 + Send + Sync + 'static,
    {
        MetricProvider {
            kind,
            description: description.to_string(),
            sampler: Arc::new(sampler),
        }
    }

    /// A user-defined metric with its own unit.
    pub fn custom<F>(name: &str, unit: &str, description: &str, sampler: F) -> Self
    where
        F: Fn() -> f64 + Send + Sync + 'static,
    {
        MetricProvider::new(
            MetricKind::Custom {
                name: name.to_string(),
                unit: unit.to_string(),
            },
            description,
            sampler,
        )
    }

    /// Latency in microseconds read from `clock`.
    pub fn latency_from_clock(clock: Arc<dyn Clock>) -> Self {
        MetricProvider::new(MetricKind::Latency, "monotonic clock (us)", move || {
            clock.now_ns() as f64 / 1000.0
        })
    }

    #[inline]
    pub fn sample(&self) -> f64 {
        (self.sampler)()
    }

    pub fn kind(&self) -> &MetricKind {
        &self.kind
    }

    pub fn name(&self) -> &str {
        self.kind.name()
    }

    pub fn description(&self) -> &str {
        &self.description
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("custom metric \"{0}\" has no builtin sampler; use ProviderRegistry::register")]
    CustomNeedsRegistration(String),
    #[error("metric \"{0}\" is already registered")]
    Duplicate(String),
    #[error("metric \"{0}\" must declare a non-empty unit")]
    EmptyUnit(String),
    #[error("metric name must not be empty")]
    EmptyName,
    #[error("unknown metric \"{0}\"")]
    Unknown(String),
}

pub fn builtin_provider(kind: &MetricKind) -> Result<MetricProvider, MetricError> {
    match kind {
        MetricKind::Latency => Ok(MetricProvider::latency_from_clock(Arc::new(MonotonicClock))),
        MetricKind::MemoryRss => Ok(MetricProvider::new(
            MetricKind::MemoryRss,
            "process resident set size (bytes)",
            || procfs::resident_bytes() as f64,
        )),
        MetricKind::DiskIo => Ok(MetricProvider::new(
            MetricKind::DiskIo,
            "cumulative bytes read and written by the process",
            || procfs::io_bytes() as f64,
        )),
        MetricKind::Custom { name, .. } => Err(MetricError::CustomNeedsRegistration(name.clone())),
    }
}

/// Providers selectable by name.
pub struct ProviderRegistry {
    providers: RwLock<BTreeMap<String, MetricProvider>>,
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        ProviderRegistry::with_builtins()
    }
}

impl ProviderRegistry {
    pub fn empty() -> Self {
        ProviderRegistry {
            providers: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn with_builtins() -> Self {
        let reg = ProviderRegistry::empty();
        for kind in [MetricKind::Latency, MetricKind::MemoryRss, MetricKind::DiskIo] {
            let provider = builtin_provider(&kind).expect("builtin");
            reg.providers.write().unwrap().insert(kind.name().to_string(), provider);
        }
        reg
    }

    /// Adds `provider`. Replacing an existing name requires `allow_override`.
    pub fn register(&self, provider: MetricProvider, allow_override: bool) -> Result<(), MetricError> {
        let name = provider.name().to_string();
        if name.is_empty() {
            return Err(MetricError::EmptyName);
        }
        if provider.kind().unit().is_empty() {
            return Err(MetricError::EmptyUnit(name));
        }
        let mut providers = self.providers.write().unwrap();
        if providers.contains_key(&name) && !allow_override {
            return Err(MetricError::Duplicate(name));
        }
        providers.insert(name, provider);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<MetricProvider, MetricError> {
        let key = if name == "memory_rss" { "memory" } else { name };
        self.providers
            .read()
            .unwrap()
            .get(key)
            .cloned()
            .ok_or_else(|| MetricError::Unknown(name.to_string()))
    }

    /// Resolves a list like `["latency", "memory"]`.
    pub fn select<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<MetricProvider>, MetricError> {
        names.iter().map(|n| self.get(n.as_ref().trim())).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.providers.read().unwrap().keys().cloned().collect()
    }
}

/// Number of open file descriptors of this process.
pub fn open_fd_count() -> usize {
    std::fs::read_dir("/proc/self/fd").map(|d| d.count()).unwrap_or(0)
}

mod procfs {
    use std::fs::File;
    use std::os::unix::fs::FileExt;
    use std::sync::OnceLock;

    fn read_cached(cell: &'static OnceLock<Option<File>>, path: &str, buf: &mut [u8]) -> usize {
        let file = cell.get_or_init(|| File::open(path).ok());
        match file {
            Some(f) => f.read_at(buf, 0).unwrap_or(0),
            None => 0,
        }
    }

    fn page_size() -> u64 {
        static PAGE: OnceLock<u64> = OnceLock::new();
        *PAGE.get_or_init(|| {
            // SAFETY: sysconf has no memory-safety preconditions.
            let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
            if v > 0 {
                v as u64
            } else {
                4096
            }
        })
    }

    pub fn resident_bytes() -> u64 {
        static STATM: OnceLock<Option<File>> = OnceLock::new();
        let mut buf = [0u8; 256];
        let n = read_cached(&STATM, "/proc/self/statm", &mut buf);
        let text = std::str::from_utf8(&buf[..n]).unwrap_or("");
        text.split_ascii_whitespace()
            .nth(1)
            .and_then(|v| v.parse::<u64>().ok())
            .map(|pages| pages * page_size())
            .unwrap_or(0)
    }

    pub fn io_bytes() -> u64 {
        static IO: OnceLock<Option<File>> = OnceLock::new();
        let mut buf = [0u8; 512];
        let n = read_cached(&IO, "/proc/self/io", &mut buf);
        let text = std::str::from_utf8(&buf[..n]).unwrap_or("");
        parse_io(text)
    }

    pub fn parse_io(text: &str) -> u64 {
        text.lines()
            .filter_map(|line| {
                let (key, value) = line.split_once(':')?;
                match key.trim() {
                    "rchar" | "wchar" => value.trim().parse::<u64>().ok(),
                    _ => None,
                }
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn status_rss_bytes() -> u64 {
        let status = std::fs::read_to_string("/proc/self/status").unwrap();
        let line = status.lines().find(|l| l.starts_with("VmRSS:")).unwrap();
        let kb: u64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        kb * 1024
    }

    #[test]
    fn latency_is_monotone() {
        let p = builtin_provider(&MetricKind::Latency).unwrap();
        let mut prev = p.sample();
        for _ in 0..100_000 {
            let next = p.sample();
            assert!(next >= prev);
            prev = next;
        }
    }

    #[test]
    fn memory_tracks_allocation() {
        let p = builtin_provider(&MetricKind::MemoryRss).unwrap();
        let oracle_before = status_rss_bytes();
        let before = p.sample();
        let mut block = vec![0u8; 64 << 20];
        for i in (0..block.len()).step_by(4096) {
            block[i] = 1;
        }
        let after = p.sample();
        let oracle_after = status_rss_bytes();
        std::hint::black_box(&block);
        assert!(oracle_after - oracle_before >= 48 << 20, "oracle disagrees with setup");
        assert!(after - before >= (48 << 20) as f64, "delta {}", after - before);
    }

    #[test]
    fn disk_io_counts_written_bytes() {
        let p = builtin_provider(&MetricKind::DiskIo).unwrap();
        let mut file = tempfile::tempfile().unwrap();
        let n = 1 << 20;
        let before = p.sample();
        file.write_all(&vec![7u8; n]).unwrap();
        file.sync_all().unwrap();
        let after = p.sample();
        let size = file.metadata().unwrap().len() as f64;
        assert!(after - before >= size, "delta {} < {}", after - before, size);
    }

    #[test]
    fn parse_io_sums_char_counters() {
        assert_eq!(procfs::parse_io("rchar: 10\nwchar: 5\nsyscr: 2\nread_bytes: 100\n"), 15);
    }

    #[test]
    fn custom_kind_needs_registration() {
        let kind = MetricKind::Custom {
            name: "open_fds".into(),
            unit: "fd".into(),
        };
        assert_eq!(
            builtin_provider(&kind).unwrap_err(),
            MetricError::CustomNeedsRegistration("open_fds".into())
        );
    }

    #[test]
    fn registry_rules() {
        let reg = ProviderRegistry::with_builtins();
        let fds = MetricProvider::custom("open_fds", "fd", "open descriptors", || open_fd_count() as f64);
        reg.register(fds.clone(), false).unwrap();
        assert_eq!(
            reg.register(fds.clone(), false).unwrap_err(),
            MetricError::Duplicate("open_fds".into())
        );
        reg.register(fds, true).unwrap();
        let empty_unit = MetricProvider::custom("x", "", "", || 0.0);
        assert_eq!(
            reg.register(empty_unit, false).unwrap_err(),
            MetricError::EmptyUnit("x".into())
        );
        let latency = builtin_provider(&MetricKind::Latency).unwrap();
        assert!(reg.register(latency.clone(), false).is_err());
        reg.register(latency, true).unwrap();

        let selected = reg.select(&["latency", "memory", "open_fds"]).unwrap();
        let names: Vec<_> = selected.iter().map(|p| p.name().to_string()).collect();
        assert_eq!(names, ["latency", "memory", "open_fds"]);
        assert_eq!(reg.get("memory_rss").unwrap().kind(), &MetricKind::MemoryRss);
        assert_eq!(reg.select(&["gpu"]).unwrap_err(), MetricError::Unknown("gpu".into()));
    }

    #[test]
    fn wire_kind_round_trip() {
        for kind in [
            MetricKind::Latency,
            MetricKind::MemoryRss,
            MetricKind::DiskIo,
            MetricKind::Custom {
                name: "open_fds".into(),
                unit: "fd".into(),
            },
        ] {
            assert_eq!(MetricKind::from_wire(kind.name(), kind.unit()), kind);
        }
    }

    #[test]
    fn step_clock_advances() {
        let c = StepClock::new(0, 5);
        assert_eq!(c.now_ns(), 5);
        c.advance(100);
        assert_eq!(c.now_ns(), 110);
    }

    fn median_sample_ns(p: &MetricProvider) -> u64 {
        let mut samples: Vec<u64> = (0..2001)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(p.sample());
                t.elapsed().as_nanos() as u64
            })
            .collect();
        samples.sort_unstable();
        samples[samples.len() / 2]
    }

    #[test]
    fn sampling_cost_is_small() {
        for kind in [MetricKind::Latency, MetricKind::MemoryRss, MetricKind::DiskIo] {
            let p = builtin_provider(&kind).unwrap();
            let median = median_sample_ns(&p);
            assert!(median < 5_000, "{kind} median sample cost {median} ns");
        }
    }
}
