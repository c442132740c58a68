use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use hiq_collector::{Collector, CollectorConfig};
use hiq_core::control::read_control;
use hiq_core::tree::wire_to_tree;

fn demo_decl() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo/targets.json")
}

fn hiq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiq"))
        .args(args)
        .env_remove("HIQ_DECL")
        .env_remove("HIQ_CTRL_PATH")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn jsonl_trees(path: &Path) -> Vec<hiq_core::HiQTree> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| wire_to_tree(l).unwrap())
        .collect()
}

#[test]
fn demo_main_renders_tree_with_overhead_line() {
    let decl = demo_decl();
    let o = hiq(&[
        "run",
        "--decl",
        decl.to_str().unwrap(),
        "--entry",
        "demo:main",
        "--metrics",
        "latency",
        "--sink",
        "stdout",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "demo: start (0 args)");
    assert_eq!(lines[1], "demo: done 6 8");
    assert!(lines[2].starts_with("main: ") && lines[2].ends_with("us"), "{out}");
    assert!(lines[3].starts_with("  OH: ") && lines[3].contains("us("), "{out}");
    assert!(lines[4].starts_with("  f1: "), "{out}");
    assert!(lines[5].starts_with("    f2: "), "{out}");
    assert!(lines[6].starts_with("  f2: "), "{out}");
}

#[test]
fn percent_format() {
    let decl = demo_decl();
    let o = hiq(&[
        "run",
        "--decl",
        decl.to_str().unwrap(),
        "--entry",
        "demo:main",
        "--format",
        "percent",
    ]);
    assert!(stdout(&o).contains("main: 100%\n"), "{}", stdout(&o));
}

#[test]
fn unknown_entry_is_a_setup_error() {
    let decl = demo_decl();
    let o = hiq(&["run", "--decl", decl.to_str().unwrap(), "--entry", "demo:absent"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent"), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());

    let o = hiq(&["run", "--decl", decl.to_str().unwrap(), "--entry", "nomodule"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_declaration_is_a_setup_error() {
    let dir = tempfile::tempdir().unwrap();
    let decl = dir.path().join("t.json");
    std::fs::write(
        &decl,
        r#"[{"name": "x", "module": "demo", "function": "nope", "class": ""}]"#,
    )
    .unwrap();
    let o = hiq(&["run", "--decl", decl.to_str().unwrap(), "--entry", "demo:main"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope not found in demo"), "{}", stderr(&o));

    std::fs::write(&decl, "[{]").unwrap();
    assert_eq!(
        hiq(&["run", "--decl", decl.to_str().unwrap(), "--entry", "demo:main"])
            .status
            .code(),
        Some(2)
    );
    let o = hiq(&["run", "--decl", "/nonexistent/t.json", "--entry", "demo:main"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_status_is_preserved() {
    let decl = demo_decl();
    for k in ["0", "1", "3"] {
        let o = hiq(&[
            "run",
            "--decl",
            decl.to_str().unwrap(),
            "--entry",
            "demo:exit_with",
            "--",
            k,
        ]);
        assert_eq!(o.status.code(), Some(k.parse().unwrap()));
        assert!(stdout(&o).starts_with(&format!("exiting with {k}\n")));
    }
}

#[test]
fn uncaught_exception_exits_nonzero_after_rendering() {
    let decl = demo_decl();
    let o = hiq(&["run", "--decl", decl.to_str().unwrap(), "--entry", "demo:fail"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ValueError: demo failure"));
    assert!(stdout(&o).starts_with("fail: "), "{}", stdout(&o));
    assert!(stdout(&o).lines().next().unwrap().ends_with("(error)"));
}

#[test]
fn two_metrics_give_two_trees_per_execution() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trees.jsonl");
    let decl = demo_decl();
    let o = hiq(&[
        "run",
        "--decl",
        decl.to_str().unwrap(),
        "--entry",
        "demo:main",
        "--metrics",
        "latency,memory",
        "--sink",
        &format!("file:{}", out.display()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trees = jsonl_trees(&out);
    let metrics: Vec<_> = trees.iter().map(|t| t.metric.name().to_string()).collect();
    assert_eq!(metrics.len(), 2);
    assert!(metrics.contains(&"latency".to_string()) && metrics.contains(&"memory".to_string()));
}

#[test]
fn unknown_metric_is_a_setup_error() {
    let decl = demo_decl();
    let o = hiq(&[
        "run",
        "--decl",
        decl.to_str().unwrap(),
        "--entry",
        "demo:main",
        "--metrics",
        "latency,gpu",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gpu"));
}

#[test]
fn render_to_keeps_target_stdout_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("none.json");
    std::fs::write(&empty, "[]").unwrap();
    let untraced = hiq(&[
        "run",
        "--decl",
        empty.to_str().unwrap(),
        "--entry",
        "demo:main",
        "--",
        "x",
    ]);
    let render = dir.path().join("render.txt");
    let decl = demo_decl();
    let traced = hiq(&[
        "run",
        "--decl",
        decl.to_str().unwrap(),
        "--entry",
        "demo:main",
        "--render-to",
        render.to_str().unwrap(),
        "--",
        "x",
    ]);
    assert_eq!(traced.stdout, untraced.stdout);
    assert_eq!(stdout(&traced), "demo: start (1 args)\ndemo: done 6 8\n");
    assert!(std::fs::read_to_string(&render).unwrap().starts_with("main: "));
}

#[test]
fn env_fallbacks() {
    let decl = demo_decl();
    let dir = tempfile::tempdir().unwrap();
    let ctrl = dir.path().join("ctrl");
    let mut block = hiq_core::ControlBlock::default();
    block
        .target_overrides
        .insert("f2".into(), hiq_core::control::Override::Off);
    hiq_core::control::write_control(&ctrl, &block).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hiq"))
        .args(["run", "--entry", "demo:main"])
        .env("HIQ_DECL", &decl)
        .env("HIQ_CTRL_PATH", &ctrl)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("  f1: "));
    assert!(!out.contains("f2:"), "{out}");
}

#[test]
fn render_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trees.jsonl");
    let decl = demo_decl();
    for entry in ["demo:main", "demo:fail"] {
        hiq(&[
            "run",
            "--decl",
            decl.to_str().unwrap(),
            "--entry",
            entry,
            "--sink",
            &format!("file:{}", out.display()),
        ]);
    }
    let trees = jsonl_trees(&out);
    assert_eq!(trees.len(), 2);

    let o = hiq(&["render", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("fail: "), "default is the last tree");

    let o = hiq(&[
        "render",
        out.to_str().unwrap(),
        "--tree-id",
        &trees[0].tree_id,
        "--format",
        "percent",
    ]);
    assert!(stdout(&o).starts_with("main: 100%"));

    let mut text = std::fs::read_to_string(&out).unwrap();
    text.push_str("{garbage\n");
    std::fs::write(&out, text).unwrap();
    let o = hiq(&["render", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("skipping undecodable line"));
    assert!(stdout(&o).starts_with("fail: "));

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = hiq(&["render", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no trees"));
}

#[test]
fn http_sink_ships_to_collector() {
    let c = Collector::spawn(CollectorConfig::ephemeral(None)).unwrap();
    let decl = demo_decl();
    let o = hiq(&[
        "run",
        "--decl",
        decl.to_str().unwrap(),
        "--entry",
        "demo:main",
        "--sink",
        &format!("http:{}", c.url()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(c.store().tree_count(), 1);
}

#[test]
fn agent_publishes_collector_config() {
    let c = Collector::spawn(CollectorConfig::ephemeral(None)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ctrl = dir.path().join("ctrl");
    let mut agent = Command::new(env!("CARGO_BIN_EXE_hiq-agent"))
        .args([
            "--collector",
            &c.url(),
            "--host",
            "h1",
            "--ctrl",
            ctrl.to_str().unwrap(),
            "--poll-ms",
            "50",
        ])
        .env("HIQ_LOG", "warn")
        .spawn()
        .unwrap();
    let http: ureq::Agent = ureq::Agent::config_builder().build().into();
    http.put(&format!("{}/v1/config?host=h1", c.url()))
        .header("content-type", "application/json")
        .send(r#"{"target_overrides": {"f2": "off"}}"#)
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(5);
    let mut seen = false;
    while Instant::now() < deadline {
        if let Ok(b) = read_control(&ctrl) {
            if b.target_overrides.contains_key("f2") {
                seen = true;
                break;
            }
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    agent.kill().unwrap();
    agent.wait().unwrap();
    assert!(seen, "agent never published the new block");
}
