//! Collector service: stores shipped trees and spans, rebuilds service trees
//! on query, and serves the per-host control config that agents poll.

pub mod api;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;

use tokio::sync::oneshot;

pub use api::{router, AppState};
pub use store::{Ingest, Store, StoreError, StoredTree, TreeFilter, TreeSummary};

#[derive(Debug, Clone)]
pub struct CollectorConfig {
    pub bind: SocketAddr,
    /// Directory for the append-only log; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
}

impl CollectorConfig {
    /// Loopback on an ephemeral port.
    pub fn ephemeral(data_dir: Option<PathBuf>) -> Self {
        CollectorConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 0)),
            data_dir,
            ui_dir: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("runtime error: {0}")]
    Runtime(#[from] std::io::Error),
}

pub fn open_store(cfg: &CollectorConfig) -> Result<Store, StoreError> {
    match &cfg.data_dir {
        Some(dir) => Store::open(dir),
        None => Ok(Store::in_memory()),
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A collector running on its own thread and runtime. Dropping the handle
/// stops it.
pub struct Collector {
    addr: SocketAddr,
    store: Arc<Store>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl Collector {
    pub fn spawn(cfg: CollectorConfig) -> Result<Collector, ServeError> {
        let store = Arc::new(open_store(&cfg)?);
        let std_listener =
            std::net::TcpListener::bind(cfg.bind).map_err(|source| ServeError::Bind { addr: cfg.bind, source })?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .thread_name("hiq-collector")
            .build()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let state = AppState {
            store: store.clone(),
            ui_dir: cfg.ui_dir.clone(),
        };
        let thread = std::thread::Builder::new()
            .name("hiq-collector-main".into())
            .spawn(move || {
                runtime.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(std_listener)?;
                    serve(listener, state, async {
                        let _ = stopped.await;
                    })
                    .await
                })
            })?;
        Ok(Collector {
            addr,
            store,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    /// Stops accepting requests and waits for in-flight ones.
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(thread) = self.thread.take() {
            match thread.join() {
                Ok(Err(e)) => tracing::error!(error = %e, "collector exited with error"),
                Err(_) => tracing::error!("collector thread panicked"),
                Ok(Ok(())) => {}
            }
        }
    }
}

impl Drop for Collector {
    fn drop(&mut self) {
        self.shutdown();
    }
}
