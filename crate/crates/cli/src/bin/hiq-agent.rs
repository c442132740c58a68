use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use clap::Parser;
use hiq_core::control::agent::{Agent, AgentConfig};
use hiq_core::control::default_control_path;
use hiq_core::registry::local_hostname;
use tracing_subscriber::EnvFilter;

/// Keeps this host's control block in sync with the collector.
#[derive(Parser, Debug)]
#[command(name = "hiq-agent", version)]
struct Args {
    /// Collector base URL, e.g. http://127.0.0.1:8470
    #[arg(long)]
    collector: String,
    /// Host name whose config to fetch (defaults to this machine's name).
    #[arg(long)]
    host: Option<String>,
    /// Control block file to publish into.
    #[arg(long, env = "HIQ_CTRL_PATH")]
    ctrl: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    poll_ms: u64,
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("HIQ_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let cfg = AgentConfig::new(
        &args.collector,
        &args.host.unwrap_or_else(local_hostname),
        args.ctrl.unwrap_or_else(default_control_path),
        Duration::from_millis(args.poll_ms),
    );
    tracing::info!(collector = %cfg.collector, host = %cfg.host, ctrl = %cfg.ctrl_path.display(), "agent starting");
    // Writes are atomic renames, so being killed mid-loop leaves a valid block.
    Agent::new(cfg).run(&AtomicBool::new(false));
}
