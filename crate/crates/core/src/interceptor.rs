//! Rebinds declared functions to tracing wrappers.
//!
//! Each wrapper call reads four clock values: `t0` on entry, `t1` just before
//! delegating to the original, `t2` just after it returns, `t3` on exit.
//! Metric samples and node bookkeeping happen inside `[t0, t1]` and
//! `[t2, t3]`; the call's overhead is `(t1 - t0) + (t3 - t2)` and is added to
//! every tree in progress on the thread. A tree carries the sum when it is
//! emitted.

use std::cell::RefCell;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, Weak};

use crate::control::{effective_state, sample_root, ControlBlock, ControlReader};
use crate::declaration::{resolve_target, Declaration, ResolveError, Site, TraceTarget};
use crate::metrics::{Clock, MetricProvider, MonotonicClock};
use crate::registry::TreeHandler;
use crate::runtime::{CallResult, Function, Runtime, Value};
use crate::tree::{self, Closed, HiQTree, NodeStack, TreeNode, WALL_US_KEY};

const MAX_METRICS: usize = 64;

/// One rebound attribute slot.
#[derive(Debug)]
pub struct Installation {
    pub target: TraceTarget,
    pub site: Site,
    pub original: Function,
    pub wrapper: Function,
    installed: AtomicBool,
}

impl Installation {
    pub fn is_installed(&self) -> bool {
        self.installed.load(Ordering::SeqCst)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum InstallError {
    #[error("cannot resolve {}", describe(.0))]
    Unresolvable(Vec<(String, ResolveError)>),
    #[error("{0} traced call(s) in flight; install/uninstall must run while the target is idle")]
    CallsInFlight(usize),
    #[error("site {0} changed while installing")]
    Raced(String),
}

fn describe(failures: &[(String, ResolveError)]) -> String {
    failures
        .iter()
        .map(|(name, e)| format!("{name}: {e}"))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum UninstallError {
    #[error("sites rebound by someone else since install (left as found): {}", .0.join(", "))]
    SitesModified(Vec<String>),
    #[error("{0} traced call(s) in flight; install/uninstall must run while the target is idle")]
    CallsInFlight(usize),
}

#[derive(Default)]
struct ThreadState {
    stacks: Vec<NodeStack>,
    overhead_ns: Vec<u64>,
    depth: usize,
    sampled: bool,
}

thread_local! {
    static STATES: RefCell<Vec<(u64, ThreadState)>> = const { RefCell::new(Vec::new()) };
}

fn with_state<R>(tracer: u64, metrics: usize, f: impl FnOnce(&mut ThreadState) -> R) -> R {
    STATES.with(|cell| {
        let mut states = cell.borrow_mut();
        let idx = match states.iter().position(|(id, _)| *id == tracer) {
            Some(i) => i,
            None => {
                states.push((
                    tracer,
                    ThreadState {
                        stacks: (0..metrics).map(|_| NodeStack::new()).collect(),
                        overhead_ns: vec![0; metrics],
                        ..ThreadState::default()
                    },
                ));
                states.len() - 1
            }
        };
        f(&mut states[idx].1)
    })
}

fn next_tracer_id() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

struct TracerInner {
    id: u64,
    providers: Vec<MetricProvider>,
    clock: Arc<dyn Clock>,
    control: Arc<ControlReader>,
    handler: Arc<dyn TreeHandler>,
    concise_threshold_us: u64,
    installations: Mutex<Vec<Arc<Installation>>>,
    in_flight: AtomicUsize,
}

pub struct TracerBuilder {
    providers: Vec<MetricProvider>,
    clock: Arc<dyn Clock>,
    control: Arc<ControlReader>,
    handler: Arc<dyn TreeHandler>,
    concise_threshold_us: u64,
}

impl TracerBuilder {
    pub fn providers(mut self, providers: Vec<MetricProvider>) -> Self {
        self.providers = providers;
        self
    }

    /// Clock used for overhead accounting.
    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn control(mut self, control: Arc<ControlReader>) -> Self {
        self.control = control;
        self
    }

    /// Concise threshold applied when the control block does not set one.
    pub fn concise_threshold_us(mut self, threshold: u64) -> Self {
        self.concise_threshold_us = threshold;
        self
    }

    pub fn build(self) -> Tracer {
        assert!(self.providers.len() <= MAX_METRICS, "at most {MAX_METRICS} metrics");
        Tracer {
            inner: Arc::new(TracerInner {
                id: next_tracer_id(),
                providers: self.providers,
                clock: self.clock,
                control: self.control,
                handler: self.handler,
                concise_threshold_us: self.concise_threshold_us,
                installations: Mutex::new(Vec::new()),
                in_flight: AtomicUsize::new(0),
            }),
        }
    }
}

/// Owns installations and the tracing context they share. Wrappers hold the
/// context weakly: once every `Tracer` clone is dropped, installed wrappers
/// pass calls straight to the original.
#[derive(Clone)]
pub struct Tracer {
    inner: Arc<TracerInner>,
}

impl Tracer {
    /// Defaults: latency only, monotonic clock, tracing always on.
    pub fn builder(handler: Arc<dyn TreeHandler>) -> TracerBuilder {
        TracerBuilder {
            providers: vec![MetricProvider::latency_from_clock(Arc::new(MonotonicClock))],
            clock: Arc::new(MonotonicClock),
            control: Arc::new(ControlReader::fixed(ControlBlock::default())),
            handler,
            concise_threshold_us: 0,
        }
    }

    pub fn providers(&self) -> &[MetricProvider] {
        &self.inner.providers
    }

    pub fn installations(&self) -> Vec<Arc<Installation>> {
        self.inner.installations.lock().unwrap().clone()
    }

    pub fn in_flight(&self) -> usize {
        self.inner.in_flight.load(Ordering::SeqCst)
    }

    /// Rebinds every target in `decl`. All-or-nothing: if any target fails to
    /// resolve, no site is touched. Targets already installed by this tracer
    /// are returned as they are.
    pub fn install(&self, rt: &Runtime, decl: &Declaration) -> Result<Vec<Arc<Installation>>, InstallError> {
        let busy = self.in_flight();
        if busy > 0 {
            return Err(InstallError::CallsInFlight(busy));
        }
        let mut installs = self.inner.installations.lock().unwrap();

        enum Plan {
            Existing(Arc<Installation>),
            New(crate::declaration::ResolvedTarget),
        }
        let mut plan = Vec::with_capacity(decl.targets.len());
        let mut failures = Vec::new();
        for target in &decl.targets {
            if let Some(existing) = installs
                .iter()
                .find(|i| i.target.site_key() == target.site_key() && i.is_installed())
            {
                plan.push(Plan::Existing(existing.clone()));
                continue;
            }
            match resolve_target(target, rt) {
                Ok(r) => plan.push(Plan::New(r)),
                Err(e) => failures.push((target.name.clone(), e)),
            }
        }
        if !failures.is_empty() {
            return Err(InstallError::Unresolvable(failures));
        }

        let mut out = Vec::with_capacity(plan.len());
        let mut fresh: Vec<Arc<Installation>> = Vec::new();
        for step in plan {
            let inst = match step {
                Plan::Existing(inst) => inst,
                Plan::New(r) => {
                    let wrapper = self.make_wrapper(&r.target.name, r.original.clone());
                    if !r
                        .site
                        .owner
                        .replace_function(&r.site.attr, &r.original, wrapper.clone())
                    {
                        for done in &fresh {
                            done.site
                                .owner
                                .replace_function(&done.site.attr, &done.wrapper, done.original.clone());
                        }
                        return Err(InstallError::Raced(r.site.to_string()));
                    }
                    let inst = Arc::new(Installation {
                        target: r.target,
                        site: r.site,
                        original: r.original,
                        wrapper,
                        installed: AtomicBool::new(true),
                    });
                    fresh.push(inst.clone());
                    inst
                }
            };
            out.push(inst);
        }
        installs.extend(fresh);
        Ok(out)
    }

    /// Restores original callables. Sites rebound by third parties since
    /// install are left alone and reported; the rest are restored.
    pub fn uninstall(&self, installations: &[Arc<Installation>]) -> Result<(), UninstallError> {
        let busy = self.in_flight();
        if busy > 0 {
            return Err(UninstallError::CallsInFlight(busy));
        }
        let mut modified = Vec::new();
        for inst in installations {
            if !inst.is_installed() {
                continue;
            }
            if inst
                .site
                .owner
                .replace_function(&inst.site.attr, &inst.wrapper, inst.original.clone())
            {
                inst.installed.store(false, Ordering::SeqCst);
            } else {
                modified.push(inst.site.to_string());
            }
        }
        self.inner.installations.lock().unwrap().retain(|i| i.is_installed());
        if modified.is_empty() {
            Ok(())
        } else {
            Err(UninstallError::SitesModified(modified))
        }
    }

    pub fn uninstall_all(&self) -> Result<(), UninstallError> {
        let all = self.installations();
        self.uninstall(&all)
    }

    fn make_wrapper(&self, label: &str, original: Function) -> Function {
        let tracer: Weak<TracerInner> = Arc::downgrade(&self.inner);
        let label: Arc<str> = Arc::from(label);
        let meta = original.meta().clone();
        Function::new(meta, move |rt, args| match tracer.upgrade() {
            Some(inner) => inner.wrapper_call(&label, &original, rt, args),
            None => original.call(rt, args),
        })
    }
}

impl TracerInner {
    fn wrapper_call(&self, label: &str, original: &Function, rt: &Runtime, args: &[Value]) -> CallResult {
        let t0 = self.clock.now_ns();
        self.in_flight.fetch_add(1, Ordering::Relaxed);
        let block = self.control.snapshot();
        let n = self.providers.len();

        let active: u64 = with_state(self.id, n, |st| {
            if st.depth == 0 {
                st.sampled = block.global_enabled && {
                    let rate = block.sample_rate;
                    let draw = if rate > 0.0 && rate < 1.0 {
                        rand::random::<f64>()
                    } else {
                        0.0
                    };
                    sample_root(&block, draw)
                };
            }
            st.depth += 1;
            let mut mask = 0u64;
            if st.sampled {
                for (i, p) in self.providers.iter().enumerate() {
                    if effective_state(&block, label, p.name()) {
                        st.stacks[i].open_node(label, p.sample());
                        mask |= 1 << i;
                    }
                }
            }
            mask
        });

        let t1 = self.clock.now_ns();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| original.call(rt, args)));
        let t2 = self.clock.now_ns();

        let failed = !matches!(outcome, Ok(Ok(_)));
        let finished: Vec<(usize, HiQTree)> = with_state(self.id, n, |st| {
            let mut finished = Vec::new();
            for (i, p) in self.providers.iter().enumerate() {
                if active & (1 << i) == 0 {
                    continue;
                }
                match st.stacks[i].close_node(p.sample(), failed) {
                    Ok(Closed::Child) => {}
                    Ok(Closed::Root(root)) => finished.push((i, self.seal(i, root, t1, t2, &block))),
                    Err(e) => tracing::error!(error = %e, "unbalanced node stack"),
                }
            }
            st.depth -= 1;
            finished
        });
        let t3 = self.clock.now_ns();

        let overhead = (t1 - t0) + (t3 - t2);
        let mut finished = finished;
        with_state(self.id, n, |st| {
            for i in 0..n {
                let emitting = finished.iter().any(|(j, _)| *j == i);
                if emitting || !st.stacks[i].is_empty() {
                    st.overhead_ns[i] += overhead;
                }
            }
            for (i, tree) in finished.iter_mut() {
                tree.overhead_us = std::mem::take(&mut st.overhead_ns[*i]) / 1000;
            }
        });
        for (_, tree) in finished {
            self.handler.handle(tree);
        }
        self.in_flight.fetch_sub(1, Ordering::Relaxed);

        match outcome {
            Ok(result) => result,
            Err(payload) => panic::resume_unwind(payload),
        }
    }

    /// Turns a finished root into a tree, applying concise mode.
    fn seal(&self, metric: usize, mut root: TreeNode, t1: u64, t2: u64, block: &ControlBlock) -> HiQTree {
        let kind = self.providers[metric].kind().clone();
        if !kind.is_latency() {
            root.extra
                .insert(WALL_US_KEY.to_string(), tree::format_number((t2 - t1) as f64 / 1000.0));
        }
        let mut tree = HiQTree::new(root, kind);
        let threshold_us = if block.concise_threshold_us > 0 {
            block.concise_threshold_us as u64
        } else {
            self.concise_threshold_us
        };
        if threshold_us > 0 {
            let threshold = if tree.metric.is_latency() {
                threshold_us as f64
            } else {
                f64::MIN_POSITIVE
            };
            tree = tree::concise_filter_owned(tree, threshold).expect("threshold is non-negative");
        }
        tree
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{write_control, Override};
    use crate::metrics::{open_fd_count, StepClock};
    use crate::registry::MemoryHandler;
    use crate::runtime::{Raised, SharedBuffer};
    use serde_json::json;
    use std::time::{Duration, Instant};

    fn demo_runtime() -> (Runtime, SharedBuffer) {
        let out = SharedBuffer::new();
        let rt = Runtime::with_output(Box::new(out.clone()));
        rt.register_module("my_model_1", |m| {
            m.def("func1", &["x"], |rt, args| {
                rt.print("func1");
                rt.call("my_model_2", "func2", args)
            });
            m.def("add", &["a", "b"], |_, args| {
                Ok(json!(args[0].as_i64().unwrap() + args[1].as_i64().unwrap()))
            });
            m.def("boom", &[], |_, _| Err(Raised::new("ValueError", "bad input")));
            m.def("main", &[], |rt, _| {
                rt.call("my_model_1", "func1", &[json!(1)])?;
                rt.call("my_model_1", "func1", &[json!(2)])
            });
            m.def("fib", &["n"], |rt, args| {
                let n = args[0].as_i64().unwrap();
                if n < 2 {
                    return Ok(json!(n));
                }
                let a = rt.call("my_model_1", "fib", &[json!(n - 1)])?.as_i64().unwrap();
                let b = rt.call("my_model_1", "fib", &[json!(n - 2)])?.as_i64().unwrap();
                Ok(json!(a + b))
            });
            m.def("sleepy", &["ms"], |_, args| {
                std::thread::sleep(Duration::from_millis(args[0].as_u64().unwrap()));
                Ok(Value::Null)
            });
            m.def("open_files", &["k"], |_, args| {
                let files: Vec<_> = (0..args[0].as_u64().unwrap())
                    .map(|_| tempfile::tempfile().unwrap())
                    .collect();
                let n = open_fd_count();
                drop(files);
                Ok(json!(n))
            });
        });
        rt.register_module("my_model_2", |m| {
            m.def("func2", &["x"], |_, args| Ok(json!(args[0].as_i64().unwrap() * 10)));
        });
        (rt, out)
    }

    fn decl(entries: &[(&str, &str, &str)]) -> Declaration {
        Declaration {
            targets: entries.iter().map(|(n, m, f)| TraceTarget::new(n, m, f, "")).collect(),
            source: crate::declaration::DeclarationSource::Inline,
        }
    }

    fn tracer(handler: &MemoryHandler) -> Tracer {
        Tracer::builder(Arc::new(handler.clone())).build()
    }

    fn shape(node: &TreeNode) -> String {
        if node.children.is_empty() {
            node.name.clone()
        } else {
            let kids: Vec<_> = node.children.iter().map(shape).collect();
            format!("{}({})", node.name, kids.join(","))
        }
    }

    #[test]
    fn install_routes_through_wrapper() {
        let (rt, _) = demo_runtime();
        let h = MemoryHandler::new();
        let t = tracer(&h);
        let installs = t
            .install(
                &rt,
                &decl(&[("f1", "my_model_1", "func1"), ("f2", "my_model_2", "func2")]),
            )
            .unwrap();
        assert_eq!(installs.len(), 2);
        let current = rt.import("my_model_1").unwrap().get("func1").unwrap();
        assert!(current.as_function().unwrap().same(&installs[0].wrapper));
        assert_eq!(installs[0].wrapper.meta(), installs[0].original.meta());

        assert_eq!(rt.call("my_model_1", "func1", &[json!(4)]).unwrap(), json!(40));
        let trees = h.take();
        assert_eq!(trees.len(), 1);
        assert_eq!(shape(&trees[0].root), "f1(f2)");
    }

    #[test]
    fn install_is_idempotent() {
        let (rt, _) = demo_runtime();
        let t = tracer(&MemoryHandler::new());
        let d = decl(&[("f1", "my_model_1", "func1"), ("f2", "my_model_2", "func2")]);
        let a = t.install(&rt, &d).unwrap();
        let b = t.install(&rt, &d).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| Arc::ptr_eq(x, y)));
        assert!(rt
            .import("my_model_1")
            .unwrap()
            .get("func1")
            .unwrap()
            .as_function()
            .unwrap()
            .same(&a[0].wrapper));
        assert_eq!(t.installations().len(), 2);
    }

    #[test]
    fn install_is_all_or_nothing() {
        let (rt, _) = demo_runtime();
        let t = tracer(&MemoryHandler::new());
        let before = rt.import("my_model_1").unwrap().get("func1").unwrap();
        let err = t
            .install(
                &rt,
                &decl(&[("f1", "my_model_1", "func1"), ("bad", "my_model_1", "no_such_fn")]),
            )
            .unwrap_err();
        assert!(err.to_string().contains("no_such_fn not found in my_model_1"), "{err}");
        match err {
            InstallError::Unresolvable(f) => assert_eq!(f.len(), 1),
            other => panic!("unexpected {other:?}"),
        }
        let after = rt.import("my_model_1").unwrap().get("func1").unwrap();
        assert!(after.as_function().unwrap().same(before.as_function().unwrap()));
        assert!(t.installations().is_empty());
    }

    #[test]
    fn uninstall_restores_originals() {
        let (rt, _) = demo_runtime();
        let h = MemoryHandler::new();
        let t = tracer(&h);
        let installs = t.install(&rt, &decl(&[("f1", "my_model_1", "func1")])).unwrap();
        t.uninstall(&installs).unwrap();
        let current = rt.import("my_model_1").unwrap().get("func1").unwrap();
        assert!(current.as_function().unwrap().same(&installs[0].original));
        rt.call("my_model_1", "func1", &[json!(1)]).unwrap();
        assert!(h.trees().is_empty());
        t.uninstall(&installs).unwrap();
        assert!(!installs[0].is_installed());
    }

    #[test]
    fn uninstall_reports_third_party_rebinding() {
        let (rt, _) = demo_runtime();
        let t = tracer(&MemoryHandler::new());
        let installs = t
            .install(
                &rt,
                &decl(&[("f1", "my_model_1", "func1"), ("f2", "my_model_2", "func2")]),
            )
            .unwrap();
        let m1 = rt.import("my_model_1").unwrap();
        let patch = m1.def("func1", &["x"], |_, _| Ok(json!("patched")));
        let err = t.uninstall(&installs).unwrap_err();
        assert!(err.to_string().contains("my_model_1.func1"), "{err}");
        assert!(m1.get("func1").unwrap().as_function().unwrap().same(&patch));
        let m2 = rt.import("my_model_2").unwrap();
        assert!(m2
            .get("func2")
            .unwrap()
            .as_function()
            .unwrap()
            .same(&installs[1].original));
    }

    #[test]
    fn results_and_errors_pass_through() {
        let (rt, _) = demo_runtime();
        let untraced_add = rt.call("my_model_1", "add", &[json!(2), json!(3)]);
        let untraced_boom = rt.call("my_model_1", "boom", &[]);
        let h = MemoryHandler::new();
        let t = tracer(&h);
        t.install(
            &rt,
            &decl(&[("add", "my_model_1", "add"), ("boom", "my_model_1", "boom")]),
        )
        .unwrap();
        assert_eq!(rt.call("my_model_1", "add", &[json!(2), json!(3)]), untraced_add);
        assert_eq!(untraced_add.unwrap(), json!(5));
        assert_eq!(rt.call("my_model_1", "boom", &[]), untraced_boom);
        let trees = h.take();
        assert_eq!(trees.len(), 2);
        assert!(!trees[0].root.error_flag);
        assert!(trees[1].root.error_flag);
    }

    #[test]
    fn recursion_creates_one_node_per_call() {
        let (rt, _) = demo_runtime();
        let h = MemoryHandler::new();
        let _t = tracer(&h);
        _t.install(&rt, &decl(&[("fib", "my_model_1", "fib")])).unwrap();
        assert_eq!(rt.call("my_model_1", "fib", &[json!(5)]).unwrap(), json!(5));
        let trees = h.take();
        assert_eq!(trees.len(), 1);
        // fib(5) makes 15 calls.
        assert_eq!(trees[0].node_count(), 15);
    }

    #[test]
    fn panics_unwind_and_leave_state_balanced() {
        let (rt, _) = demo_runtime();
        rt.import("my_model_1")
            .unwrap()
            .def("panicky", &[], |_, _| panic!("boom"));
        let h = MemoryHandler::new();
        let t = tracer(&h);
        t.install(
            &rt,
            &decl(&[("p", "my_model_1", "panicky"), ("add", "my_model_1", "add")]),
        )
        .unwrap();
        let caught = panic::catch_unwind(AssertUnwindSafe(|| rt.call("my_model_1", "panicky", &[])));
        assert!(caught.is_err());
        assert!(h.take()[0].root.error_flag);
        rt.call("my_model_1", "add", &[json!(1), json!(1)]).unwrap();
        assert_eq!(h.take()[0].root.name, "add");
        assert_eq!(t.in_flight(), 0);
    }

    #[test]
    fn overhead_identity_with_step_clock() {
        let (rt, _) = demo_runtime();
        let clock = Arc::new(StepClock::new(0, 7_000));
        let counter = Arc::new(AtomicU64::new(0));
        let c2 = counter.clone();
        let provider = MetricProvider::custom("calls", "n", "", move || c2.fetch_add(1, Ordering::SeqCst) as f64);
        let h = MemoryHandler::new();
        let block = ControlBlock {
            target_overrides: [("f2".to_string(), Override::Off)].into(),
            ..ControlBlock::default()
        };
        let t = Tracer::builder(Arc::new(h.clone()))
            .providers(vec![provider])
            .clock(clock.clone())
            .control(Arc::new(ControlReader::fixed(block)))
            .build();
        let m2 = rt.import("my_model_2").unwrap();
        let clock2 = clock.clone();
        m2.def("func2", &["x"], move |_, args| {
            clock2.advance(1_234_000);
            Ok(args[0].clone())
        });
        t.install(
            &rt,
            &decl(&[
                ("main", "my_model_1", "main"),
                ("f1", "my_model_1", "func1"),
                ("f2", "my_model_2", "func2"),
            ]),
        )
        .unwrap();
        rt.call("my_model_1", "main", &[]).unwrap();
        let trees = h.take();
        assert_eq!(trees.len(), 1);
        // main + 2×f1 traced, 2×f2 on the disabled path: 5 wrapper calls, each
        // with one clock step in [t0,t1] and one in [t2,t3].
        assert_eq!(trees[0].overhead_us, 5 * 2 * 7);
        assert_eq!(shape(&trees[0].root), "main(f1,f1)");
    }

    #[test]
    fn control_disables_targets_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctrl");
        let reader = Arc::new(ControlReader::open(&path, Duration::ZERO));
        let (rt, _) = demo_runtime();
        let h = MemoryHandler::new();
        let t = Tracer::builder(Arc::new(h.clone())).control(reader).build();
        t.install(
            &rt,
            &decl(&[("f1", "my_model_1", "func1"), ("f2", "my_model_2", "func2")]),
        )
        .unwrap();

        rt.call("my_model_1", "func1", &[json!(1)]).unwrap();
        assert_eq!(shape(&h.take()[0].root), "f1(f2)");

        let mut block = ControlBlock::default();
        block.target_overrides.insert("f2".into(), Override::Off);
        write_control(&path, &block).unwrap();
        rt.call("my_model_1", "func1", &[json!(1)]).unwrap();
        assert_eq!(shape(&h.take()[0].root), "f1");

        block.target_overrides.insert("f1".into(), Override::Off);
        block.target_overrides.insert("f2".into(), Override::On);
        write_control(&path, &block).unwrap();
        rt.call("my_model_1", "func1", &[json!(1)]).unwrap();
        assert_eq!(
            shape(&h.take()[0].root),
            "f2",
            "children of a disabled call attach upward"
        );

        block.enabled_metrics = ["memory".to_string()].into();
        write_control(&path, &block).unwrap();
        rt.call("my_model_1", "func1", &[json!(1)]).unwrap();
        assert!(h.take().is_empty());

        block.global_enabled = false;
        block.enabled_metrics = ["*".to_string()].into();
        write_control(&path, &block).unwrap();
        rt.call("my_model_1", "func1", &[json!(1)]).unwrap();
        assert!(h.take().is_empty());
    }

    #[test]
    fn sample_rate_decides_at_root() {
        let (rt, _) = demo_runtime();
        let h = MemoryHandler::new();
        let block = ControlBlock {
            sample_rate: 0.0,
            ..ControlBlock::default()
        };
        let t = Tracer::builder(Arc::new(h.clone()))
            .control(Arc::new(ControlReader::fixed(block)))
            .build();
        t.install(
            &rt,
            &decl(&[("f1", "my_model_1", "func1"), ("f2", "my_model_2", "func2")]),
        )
        .unwrap();
        for _ in 0..50 {
            rt.call("my_model_1", "func1", &[json!(1)]).unwrap();
        }
        assert!(h.trees().is_empty());

        let h = MemoryHandler::new();
        let block = ControlBlock {
            sample_rate: 0.5,
            ..ControlBlock::default()
        };
        let (rt, _) = demo_runtime();
        let t = Tracer::builder(Arc::new(h.clone()))
            .control(Arc::new(ControlReader::fixed(block)))
            .build();
        t.install(
            &rt,
            &decl(&[("f1", "my_model_1", "func1"), ("f2", "my_model_2", "func2")]),
        )
        .unwrap();
        for _ in 0..400 {
            rt.call("my_model_1", "func1", &[json!(1)]).unwrap();
        }
        let trees = h.trees();
        assert!(trees.len() > 100 && trees.len() < 300, "{}", trees.len());
        assert!(
            trees.iter().all(|t| shape(&t.root) == "f1(f2)"),
            "children follow the root's decision"
        );
    }

    #[test]
    fn sleep_span_excludes_bookkeeping() {
        let (rt, _) = demo_runtime();
        let h = MemoryHandler::new();
        let _t = tracer(&h);
        _t.install(&rt, &decl(&[("s", "my_model_1", "sleepy")])).unwrap();
        rt.call("my_model_1", "sleepy", &[json!(20)]).unwrap();
        let tree = &h.take()[0];
        let span = tree.root.span();
        assert!(span >= 20_000.0, "span {span}");
        assert!(span < 20_000.0 + 5_000.0, "span {span}");
        assert!(tree.overhead_us < 1_000);
    }

    #[test]
    fn one_tree_per_metric_and_wall_annotation() {
        let (rt, _) = demo_runtime();
        let h = MemoryHandler::new();
        let registry = crate::metrics::ProviderRegistry::with_builtins();
        let fds = MetricProvider::custom("open_fds", "fd", "open descriptors", || open_fd_count() as f64);
        registry.register(fds, false).unwrap();
        let t = Tracer::builder(Arc::new(h.clone()))
            .providers(registry.select(&["latency", "memory", "open_fds"]).unwrap())
            .build();
        t.install(&rt, &decl(&[("of", "my_model_1", "open_files")])).unwrap();
        let inside = rt.call("my_model_1", "open_files", &[json!(5)]).unwrap();
        let trees = h.take();
        let metrics: Vec<_> = trees.iter().map(|t| t.metric.name().to_string()).collect();
        assert_eq!(metrics, ["latency", "memory", "open_fds"]);
        assert!(trees[1].root.extra.contains_key(WALL_US_KEY));
        assert!(trees[1].overhead_percent().is_ok());
        assert!(!trees[0].root.extra.contains_key(WALL_US_KEY));
        // The fd count sampled at exit no longer includes the closed files, so
        // check against the count observed inside the call.
        let start = trees[2].root.start;
        assert!(inside.as_f64().unwrap() - start >= 5.0);
    }

    #[test]
    fn concise_threshold_prunes_short_calls() {
        let (rt, _) = demo_runtime();
        let h = MemoryHandler::new();
        let t = Tracer::builder(Arc::new(h.clone())).concise_threshold_us(5_000).build();
        rt.import("my_model_1").unwrap().def("outer", &[], |rt, _| {
            rt.call("my_model_1", "sleepy", &[json!(10)])?;
            rt.call("my_model_1", "add", &[json!(1), json!(2)])
        });
        t.install(
            &rt,
            &decl(&[
                ("outer", "my_model_1", "outer"),
                ("s", "my_model_1", "sleepy"),
                ("add", "my_model_1", "add"),
            ]),
        )
        .unwrap();
        rt.call("my_model_1", "outer", &[]).unwrap();
        let tree = &h.take()[0];
        assert!(tree.concise);
        assert_eq!(shape(&tree.root), "outer(s)");
    }

    #[test]
    fn threads_build_their_own_trees() {
        let (rt, _) = demo_runtime();
        let rt = Arc::new(rt);
        let h = MemoryHandler::new();
        let _t = tracer(&h);
        _t.install(
            &rt,
            &decl(&[("f1", "my_model_1", "func1"), ("f2", "my_model_2", "func2")]),
        )
        .unwrap();
        std::thread::scope(|s| {
            for _ in 0..4 {
                let rt = rt.clone();
                s.spawn(move || {
                    for _ in 0..25 {
                        rt.call("my_model_1", "func1", &[json!(1)]).unwrap();
                    }
                });
            }
        });
        let trees = h.take();
        assert_eq!(trees.len(), 100);
        assert!(trees.iter().all(|t| shape(&t.root) == "f1(f2)"));
        let threads: std::collections::HashSet<_> = trees.iter().map(|t| t.thread_id).collect();
        assert_eq!(threads.len(), 4);
    }

    #[test]
    fn dropped_tracer_passes_calls_through() {
        let (rt, _) = demo_runtime();
        let h = MemoryHandler::new();
        tracer(&h).install(&rt, &decl(&[("add", "my_model_1", "add")])).unwrap();
        assert_eq!(rt.call("my_model_1", "add", &[json!(1), json!(2)]).unwrap(), json!(3));
        assert!(h.trees().is_empty());
    }

    #[test]
    fn install_refused_while_calls_in_flight() {
        let (rt, _) = demo_runtime();
        let h = MemoryHandler::new();
        let t = tracer(&h);
        let t2 = t.clone();
        let rt = Arc::new(rt);
        let rt2 = rt.clone();
        rt.import("my_model_1").unwrap().def("reinstall", &[], move |_, _| {
            let err = t2.install(&rt2, &decl(&[("f2", "my_model_2", "func2")])).unwrap_err();
            Ok(json!(err.to_string()))
        });
        t.install(&rt, &decl(&[("r", "my_model_1", "reinstall")])).unwrap();
        let msg = rt.call("my_model_1", "reinstall", &[]).unwrap();
        assert!(msg.as_str().unwrap().contains("in flight"));
    }

    fn median_ns(mut v: Vec<u64>) -> u64 {
        v.sort_unstable();
        v[v.len() / 2]
    }

    #[test]
    fn disabled_path_is_cheap() {
        let (rt, _) = demo_runtime();
        let f = rt
            .import("my_model_1")
            .unwrap()
            .get("add")
            .unwrap()
            .as_function()
            .unwrap()
            .clone();
        let args = [json!(1), json!(2)];
        let plain: Vec<u64> = (0..20_001)
            .map(|_| {
                let s = Instant::now();
                std::hint::black_box(f.call(&rt, &args)).unwrap();
                s.elapsed().as_nanos() as u64
            })
            .collect();
        let block = ControlBlock {
            global_enabled: false,
            ..ControlBlock::default()
        };
        let t = Tracer::builder(Arc::new(MemoryHandler::new()))
            .control(Arc::new(ControlReader::fixed(block)))
            .build();
        let installs = t.install(&rt, &decl(&[("add", "my_model_1", "add")])).unwrap();
        let w = installs[0].wrapper.clone();
        let traced: Vec<u64> = (0..20_001)
            .map(|_| {
                let s = Instant::now();
                std::hint::black_box(w.call(&rt, &args)).unwrap();
                s.elapsed().as_nanos() as u64
            })
            .collect();
        let added = median_ns(traced).saturating_sub(median_ns(plain));
        assert!(added < 3_000, "disabled path adds {added} ns");
    }
}
