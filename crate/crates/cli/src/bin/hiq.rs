use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hiq_cli::{demo, render_file, run, RunSpec, EXIT_SETUP};
use hiq_core::registry::SinkSpec;
use hiq_core::runtime::Runtime;
use hiq_core::tree::RenderFormat;
use tracing_subscriber::EnvFilter;

/// Declarative tracing driver.
#[derive(Parser, Debug)]
#[command(name = "hiq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Trace one run of an entry point.
    Run {
        /// JSON list of trace targets.
        #[arg(long, env = "HIQ_DECL")]
        decl: PathBuf,
        /// Entry point as MODULE:FUNCTION.
        #[arg(long)]
        entry: String,
        /// Comma-separated metric names.
        #[arg(long, value_delimiter = ',', default_value = "latency")]
        metrics: Vec<String>,
        /// stdout, file:PATH or http:URL; repeatable.
        #[arg(long = "sink")]
        sinks: Vec<SinkSpec>,
        /// Control block file.
        #[arg(long, env = "HIQ_CTRL_PATH")]
        ctrl: Option<PathBuf>,
        /// Drop nodes shorter than this many milliseconds.
        #[arg(long)]
        concise_ms: Option<u64>,
        #[arg(long, default_value = "absolute")]
        format: RenderFormat,
        /// Write the final render here instead of stdout.
        #[arg(long)]
        render_to: Option<PathBuf>,
        /// Arguments passed verbatim to the entry function.
        #[arg(last = true)]
        args: Vec<String>,
    },
    /// Render a tree from a JSONL sink file.
    Render {
        file: PathBuf,
        #[arg(long)]
        tree_id: Option<String>,
        #[arg(long, default_value = "absolute")]
        format: RenderFormat,
    },
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code.clamp(0, 255) as u8)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("HIQ_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return exit(if e.use_stderr() { EXIT_SETUP } else { 0 });
        }
    };
    match cli.command {
        Command::Run {
            decl,
            entry,
            metrics,
            sinks,
            ctrl,
            concise_ms,
            format,
            render_to,
            args,
        } => {
            let spec = RunSpec {
                decl,
                entry,
                metrics,
                sinks: if sinks.is_empty() {
                    vec![SinkSpec::Stdout]
                } else {
                    sinks
                },
                ctrl,
                format,
                concise_ms,
                render_to,
                args,
            };
            let rt = Runtime::new();
            demo::register(&rt);
            exit(run(&spec, &rt, &mut std::io::stdout(), &mut std::io::stderr()))
        }
        Command::Render { file, tree_id, format } => {
            match render_file(&file, tree_id.as_deref(), format, |w| eprintln!("hiq: warning: {w}")) {
                Ok(text) => {
                    print!("{text}");
                    exit(0)
                }
                Err(e) => {
                    eprintln!("hiq: {e}");
                    exit(1)
                }
            }
        }
    }
}
