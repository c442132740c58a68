use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use hiq_collector::{open_store, serve, AppState, CollectorConfig};
use tracing_subscriber::EnvFilter;

/// Ingests tree batches and spans, and serves per-host tracing config.
#[derive(Parser, Debug)]
#[command(name = "hiq-collector", version)]
struct Args {
    #[arg(long, default_value_t = 8470)]
    port: u16,
    /// Directory holding the append-only store log.
    #[arg(long, default_value = "hiq-data")]
    data: PathBuf,
    /// Address to listen on. Anything but loopback exposes an unauthenticated API.
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    /// Static console build to serve under /ui.
    #[arg(long)]
    ui: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let cfg = CollectorConfig {
        bind: SocketAddr::new(args.bind, args.port),
        data_dir: Some(args.data),
        ui_dir: args.ui,
    };
    let store = Arc::new(open_store(&cfg).context("opening store")?);
    let listener = tokio::net::TcpListener::bind(cfg.bind)
        .await
        .with_context(|| format!("binding {}", cfg.bind))?;
    tracing::info!(addr = %listener.local_addr()?, "collector listening");
    let state = AppState {
        store,
        ui_dir: cfg.ui_dir,
    };
    serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    })
    .await?;
    Ok(())
}
