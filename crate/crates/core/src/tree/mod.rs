//! Per-metric interval call trees.
//!
//! A [`NodeStack`] is the per-thread builder: wrappers open a node at call
//! entry and close it at exit. When the outermost node closes, the finished
//! root becomes a [`HiQTree`], which carries the wrapper overhead measured
//! while it was built.

mod render;
mod service;
mod wire;

use std::collections::BTreeMap;

use crate::metrics::{epoch_us, MetricKind};

pub use render::{format_number, format_percent, render_tree, RenderFormat};
pub use service::{reconstruct_service_tree, ReconstructError, ServiceNode, ServiceTree, SpanRecord, ORPHAN_ROOT};
pub use wire::{tree_to_wire, tree_to_wire_value, wire_to_tree, wire_value_to_tree, WireError};

/// Annotation key holding the root call's wall duration for trees whose
/// metric is not time.
pub const WALL_US_KEY: &str = "wall_us";

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub name: String,
    pub start: f64,
    pub end: f64,
    pub children: Vec<TreeNode>,
    pub error_flag: bool,
    pub extra: BTreeMap<String, String>,
}

impl TreeNode {
    pub fn new(name: &str, start: f64) -> Self {
        TreeNode {
            name: name.to_string(),
            start,
            end: start,
            children: Vec::new(),
            error_flag: false,
            extra: BTreeMap::new(),
        }
    }

    pub fn span(&self) -> f64 {
        self.end - self.start
    }

    /// Total number of nodes in this subtree.
    pub fn size(&self) -> usize {
        1 + self.children.iter().map(TreeNode::size).sum::<usize>()
    }

    /// Pre-order walk yielding `(depth, node)`.
    pub fn walk(&self) -> Vec<(usize, &TreeNode)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, self)];
        while let Some((depth, node)) = stack.pop() {
            out.push((depth, node));
            for child in node.children.iter().rev() {
                stack.push((depth + 1, child));
            }
        }
        out
    }

    pub fn find(&self, name: &str) -> Option<&TreeNode> {
        self.walk().into_iter().map(|(_, n)| n).find(|n| n.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiQTree {
    pub tree_id: String,
    pub metric: MetricKind,
    pub overhead_us: u64,
    pub process_id: u32,
    pub thread_id: u64,
    pub created_at_us: u64,
    pub concise: bool,
    pub root: TreeNode,
}

impl HiQTree {
    /// Wraps a finished root with fresh identity and origin metadata.
    pub fn new(root: TreeNode, metric: MetricKind) -> Self {
        HiQTree {
            tree_id: uuid::Uuid::new_v4().to_string(),
            metric,
            overhead_us: 0,
            process_id: std::process::id(),
            thread_id: current_thread_id(),
            created_at_us: epoch_us(),
            concise: false,
            root,
        }
    }

    pub fn root_span(&self) -> f64 {
        self.root.span()
    }

    /// Wall duration of the root call in microseconds: the root span for
    /// latency trees, the recorded annotation otherwise.
    pub fn root_duration_us(&self) -> Option<f64> {
        if self.metric.is_latency() {
            Some(self.root.span())
        } else {
            self.root.extra.get(WALL_US_KEY)?.parse().ok()
        }
    }

    pub fn overhead_percent(&self) -> Result<f64, TreeError> {
        let span = self.root_duration_us().unwrap_or(0.0);
        compute_overhead_percent(self.overhead_us as f64, span)
    }

    pub fn node_count(&self) -> usize {
        self.root.size()
    }
}

/// OS thread id of the caller.
pub fn current_thread_id() -> u64 {
    #[cfg(target_os = "linux")]
    {
        // SAFETY: gettid has no preconditions.
        unsafe { libc::gettid() as u64 }
    }
    #[cfg(not(target_os = "linux"))]
    {
        use std::sync::atomic::{AtomicU64, Ordering};
        static NEXT: AtomicU64 = AtomicU64::new(1);
        thread_local!(static ID: u64 = NEXT.fetch_add(1, Ordering::Relaxed));
        ID.with(|id| *id)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TreeError {
    #[error("close_node on an empty stack")]
    EmptyStack,
    #[error("threshold must be a non-negative number, got {0}")]
    NegativeThreshold(f64),
    #[error("overhead percentage undefined for root span {0}")]
    UndefinedPercentage(f64),
}

/// Result of closing the top node of a stack.
#[derive(Debug, PartialEq)]
pub enum Closed {
    /// An inner node was sealed and attached to its parent.
    Child,
    /// The outermost node closed; the stack is empty again.
    Root(TreeNode),
}

/// Per-thread stack of in-progress nodes for one metric.
#[derive(Debug, Default)]
pub struct NodeStack {
    frames: Vec<TreeNode>,
}

impl NodeStack {
    pub fn new() -> Self {
        NodeStack::default()
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn open_node(&mut self, name: &str, start: f64) {
        self.frames.push(TreeNode::new(name, start));
    }

    pub fn close_node(&mut self, end: f64, error_flag: bool) -> Result<Closed, TreeError> {
        let mut node = self.frames.pop().ok_or(TreeError::EmptyStack)?;
        node.end = end;
        node.error_flag = error_flag;
        match self.frames.last_mut() {
            Some(parent) => {
                parent.children.push(node);
                Ok(Closed::Child)
            }
            None => Ok(Closed::Root(node)),
        }
    }

    /// Annotates the node currently on top of the stack.
    pub fn annotate_top(&mut self, key: &str, value: String) {
        if let Some(top) = self.frames.last_mut() {
            top.extra.insert(key.to_string(), value);
        }
    }
}

/// Drops every non-root node whose span is below `threshold`, together with
/// its subtree.
pub fn concise_filter(tree: &HiQTree, threshold: f64) -> Result<HiQTree, TreeError> {
    concise_filter_owned(tree.clone(), threshold)
}

/// [`concise_filter`] without the copy.
pub fn concise_filter_owned(mut tree: HiQTree, threshold: f64) -> Result<HiQTree, TreeError> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(TreeError::NegativeThreshold(threshold));
    }
    fn prune(node: &mut TreeNode, threshold: f64) {
        node.children.retain(|c| c.span() >= threshold);
        for child in &mut node.children {
            prune(child, threshold);
        }
    }
    prune(&mut tree.root, threshold);
    tree.concise = true;
    Ok(tree)
}

/// `100 * overhead / root_span`.
pub fn compute_overhead_percent(overhead_us: f64, root_span_us: f64) -> Result<f64, TreeError> {
    if root_span_us.is_nan() || root_span_us <= 0.0 {
        return Err(TreeError::UndefinedPercentage(root_span_us));
    }
    Ok(100.0 * overhead_us / root_span_us)
}
