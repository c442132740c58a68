//! Per-host agent: polls the collector's config endpoint and republishes the
//! host's block into the shared-memory file when the revision changes.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{write_control, ControlBlock, ControlError};

pub const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub collector: String,
    pub host: String,
    pub ctrl_path: PathBuf,
    pub poll: Duration,
    pub max_backoff: Duration,
}

impl AgentConfig {
    pub fn new(collector: &str, host: &str, ctrl_path: impl Into<PathBuf>, poll: Duration) -> Self {
        AgentConfig {
            collector: collector.trim_end_matches('/').to_string(),
            host: host.to_string(),
            ctrl_path: ctrl_path.into(),
            poll,
            max_backoff: MAX_BACKOFF,
        }
    }
}

/// Body of `GET /v1/config?host=H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResponse {
    pub host: String,
    pub revision: u64,
    pub block: ControlBlock,
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("collector request failed: {0}")]
    Http(String),
    #[error("collector answered HTTP {0}")]
    Status(u16),
    #[error("bad config response: {0}")]
    Decode(String),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncOutcome {
    Unchanged,
    Written { revision: u64, seq: u64 },
}

pub struct Agent {
    cfg: AgentConfig,
    http: ureq::Agent,
    last_revision: Option<u64>,
    failures: u32,
}

impl Agent {
    pub fn new(cfg: AgentConfig) -> Self {
        let http = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(5)))
            .http_status_as_error(false)
            .build()
            .into();
        Agent {
            cfg,
            http,
            last_revision: None,
            failures: 0,
        }
    }

    pub fn last_revision(&self) -> Option<u64> {
        self.last_revision
    }

    /// One fetch-compare-publish round.
    pub fn poll_once(&mut self) -> Result<SyncOutcome, AgentError> {
        let result = self.fetch().and_then(|resp| self.apply(resp));
        match &result {
            Ok(_) => self.failures = 0,
            Err(_) => self.failures = self.failures.saturating_add(1),
        }
        result
    }

    fn fetch(&self) -> Result<ConfigResponse, AgentError> {
        let url = format!("{}/v1/config?host={}", self.cfg.collector, self.cfg.host);
        let mut resp = self
            .http
            .get(&url)
            .call()
            .map_err(|e| AgentError::Http(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(AgentError::Status(status));
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AgentError::Http(e.to_string()))?;
        serde_json::from_str(&body).map_err(|e| AgentError::Decode(e.to_string()))
    }

    fn apply(&mut self, resp: ConfigResponse) -> Result<SyncOutcome, AgentError> {
        if self.last_revision == Some(resp.revision) {
            return Ok(SyncOutcome::Unchanged);
        }
        let seq = write_control(&self.cfg.ctrl_path, &resp.block)?;
        tracing::info!(revision = resp.revision, seq, "published control block");
        self.last_revision = Some(resp.revision);
        Ok(SyncOutcome::Written {
            revision: resp.revision,
            seq,
        })
    }

    /// Poll interval after a success; doubling backoff capped at
    /// `max_backoff` after consecutive failures.
    pub fn next_delay(&self) -> Duration {
        if self.failures == 0 {
            return self.cfg.poll;
        }
        let factor = 1u32.checked_shl(self.failures.min(20)).unwrap_or(u32::MAX);
        self.cfg
            .poll
            .checked_mul(factor)
            .unwrap_or(self.cfg.max_backoff)
            .min(self.cfg.max_backoff)
    }

    /// Runs until `shutdown` is set.
    pub fn run(&mut self, shutdown: &AtomicBool) {
        while !shutdown.load(Ordering::Relaxed) {
            if let Err(e) = self.poll_once() {
                tracing::warn!(error = %e, failures = self.failures, "config sync failed");
            }
            let wake = Instant::now() + self.next_delay();
            while !shutdown.load(Ordering::Relaxed) {
                let now = Instant::now();
                if now >= wake {
                    break;
                }
                std::thread::sleep((wake - now).min(Duration::from_millis(10)));
            }
        }
    }
}
