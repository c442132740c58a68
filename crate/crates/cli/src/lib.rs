//! The `hiq` driver: loads a declaration, installs interception into a
//! runtime, runs an entry point, then ships and renders the trees.

pub mod demo;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hiq_core::control::ControlReader;
use hiq_core::metrics::ProviderRegistry;
use hiq_core::registry::{MemoryHandler, Pipeline, RegistryConfig, SinkSpec, Tee, TreeHandler};
use hiq_core::runtime::{Runtime, Value};
use hiq_core::tree::{render_tree, wire_to_tree, RenderFormat};
use hiq_core::{Declaration, HiQTree, Tracer};

/// Exit status for setup failures.
pub const EXIT_SETUP: i32 = 2;
/// Exit status when the target raised an uncaught exception.
pub const EXIT_UNCAUGHT: i32 = 1;

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub decl: PathBuf,
    pub entry: String,
    pub metrics: Vec<String>,
    pub sinks: Vec<SinkSpec>,
    pub ctrl: Option<PathBuf>,
    pub format: RenderFormat,
    pub concise_ms: Option<u64>,
    pub render_to: Option<PathBuf>,
    pub args: Vec<String>,
}

impl RunSpec {
    pub fn new(decl: impl Into<PathBuf>, entry: &str) -> Self {
        RunSpec {
            decl: decl.into(),
            entry: entry.to_string(),
            metrics: vec!["latency".to_string()],
            sinks: vec![SinkSpec::Stdout],
            ctrl: None,
            format: RenderFormat::Absolute,
            concise_ms: None,
            render_to: None,
            args: Vec::new(),
        }
    }
}

/// `module:function` with both parts non-empty.
pub fn parse_entry(entry: &str) -> Result<(&str, &str), String> {
    match entry.split_once(':') {
        Some((m, f)) if !m.is_empty() && !f.is_empty() && !f.contains(':') => Ok((m, f)),
        _ => Err(format!("entry \"{entry}\" must look like MODULE:FUNCTION")),
    }
}

struct SetupError(String);

impl<E: fmt::Display> From<E> for SetupError {
    fn from(e: E) -> Self {
        SetupError(e.to_string())
    }
}

/// Runs `spec` against the modules registered on `rt` and returns the exit
/// status. Setup diagnostics and uncaught exceptions go to `stderr`; the
/// final render goes to `out` unless `render_to` is set.
pub fn run(spec: &RunSpec, rt: &Runtime, out: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    match run_inner(spec, rt, out, stderr) {
        Ok(code) => code,
        Err(SetupError(msg)) => {
            let _ = writeln!(stderr, "hiq: {msg}");
            EXIT_SETUP
        }
    }
}

fn run_inner(spec: &RunSpec, rt: &Runtime, out: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32, SetupError> {
    let decl = Declaration::from_file(&spec.decl)?;
    let (module, function) = parse_entry(&spec.entry).map_err(SetupError)?;
    let owner = rt.import(module)?;
    if owner.get(function).and_then(|a| a.as_function().cloned()).is_none() {
        return Err(SetupError(format!(
            "entry {}: {function} not found in {module}",
            spec.entry
        )));
    }
    let providers = ProviderRegistry::with_builtins().select(&spec.metrics)?;
    let sinks = spec
        .sinks
        .iter()
        .filter(|s| **s != SinkSpec::Stdout)
        .map(|s| s.open())
        .collect::<Result<Vec<_>, _>>()?;
    let control = match &spec.ctrl {
        Some(path) => Arc::new(ControlReader::open(path, hiq_core::control::poll_from_env())),
        None => Arc::new(ControlReader::from_env()),
    };

    let captured = MemoryHandler::new();
    let pipeline = (!sinks.is_empty()).then(|| Pipeline::start(RegistryConfig::default(), sinks));
    let mut handlers: Vec<Arc<dyn TreeHandler>> = vec![Arc::new(captured.clone())];
    if let Some(p) = &pipeline {
        handlers.push(p.registry());
    }
    let mut builder = Tracer::builder(Arc::new(Tee(handlers)))
        .providers(providers)
        .control(control);
    if let Some(ms) = spec.concise_ms {
        builder = builder.concise_threshold_us(ms.saturating_mul(1000));
    }
    let tracer = builder.build();
    tracer.install(rt, &decl)?;

    let args: Vec<Value> = spec.args.iter().map(|a| Value::String(a.clone())).collect();
    let outcome = rt.call(module, function, &args);
    rt.flush_output();

    if let Some(p) = pipeline {
        let report = p.shutdown();
        for s in report.sinks.iter().filter(|s| s.failures > 0) {
            let _ = writeln!(stderr, "hiq: sink {} failed for {} batch(es)", s.name, s.failures);
        }
    }
    if let Err(e) = tracer.uninstall_all() {
        let _ = writeln!(stderr, "hiq: {e}");
    }

    let trees = captured.take();
    let latency: Vec<&HiQTree> = trees.iter().filter(|t| t.metric.is_latency()).collect();
    let shown: Vec<&HiQTree> = if latency.is_empty() {
        trees.iter().collect()
    } else {
        latency
    };
    let text = shown
        .iter()
        .map(|t| render_tree(t, spec.format))
        .collect::<Vec<_>>()
        .join("\n");
    match &spec.render_to {
        Some(path) => std::fs::write(path, text).map_err(|e| SetupError(format!("{}: {e}", path.display())))?,
        None => {
            let _ = out.write_all(text.as_bytes());
            let _ = out.flush();
        }
    }

    Ok(match outcome {
        Ok(_) => 0,
        Err(raised) => match raised.exit_code() {
            Some(code) => code,
            None => {
                let _ = writeln!(
                    stderr,
                    "Traceback (most recent call last):\n  {}: {}",
                    raised.kind, raised.message
                );
                EXIT_UNCAUGHT
            }
        },
    })
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("no trees")]
    NoTrees,
    #[error("tree {0} not found")]
    NotFound(String),
    #[error("{}: {1}", .0.display())]
    Io(PathBuf, std::io::Error),
}

/// Renders one tree from a JSONL file: `tree_id` if given, else the last
/// decodable line. Undecodable lines are reported through `warn`.
pub fn render_file(
    path: &Path,
    tree_id: Option<&str>,
    format: RenderFormat,
    mut warn: impl FnMut(String),
) -> Result<String, RenderError> {
    let text = std::fs::read_to_string(path).map_err(|e| RenderError::Io(path.to_path_buf(), e))?;
    let mut chosen = None;
    let mut seen = false;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match wire_to_tree(line) {
            Ok(tree) => {
                seen = true;
                match tree_id {
                    Some(id) if tree.tree_id == id => chosen = Some(tree),
                    Some(_) => {}
                    None => chosen = Some(tree),
                }
            }
            Err(e) => warn(format!("{}:{}: skipping undecodable line: {e}", path.display(), i + 1)),
        }
    }
    match (chosen, tree_id) {
        (Some(tree), _) => Ok(render_tree(&tree, format)),
        (None, Some(id)) if seen => Err(RenderError::NotFound(id.to_string())),
        _ => Err(RenderError::NoTrees),
    }
}
