//! Service subtrees: spans shipped by individual services and stitched back
//! together by parent span id.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

/// Name of the synthetic root collecting spans whose parent never arrived.
pub const ORPHAN_ROOT: &str = "(orphan)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub trace_id: String,
    pub span_id: String,
    #[serde(default)]
    pub parent_span_id: String,
    pub service: String,
    pub name: String,
    pub start_us: u64,
    pub end_us: u64,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl SpanRecord {
    /// Returns the violated invariants, if any.
    pub fn validate(&self) -> Result<(), Vec<&'static str>> {
        let mut bad = Vec::new();
        if self.trace_id.is_empty() {
            bad.push("trace_id");
        }
        if self.span_id.is_empty() {
            bad.push("span_id");
        }
        if self.end_us < self.start_us {
            bad.push("end_us");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceNode {
    pub span_id: String,
    pub service: String,
    pub name: String,
    pub start_us: u64,
    pub end_us: u64,
    /// Set on spans whose parent is not in the trace, and on the synthetic
    /// orphan root.
    pub orphan: bool,
    pub children: Vec<ServiceNode>,
}

impl ServiceNode {
    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(ServiceNode::depth).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceTree {
    pub trace_id: String,
    pub roots: Vec<ServiceNode>,
}

impl ServiceTree {
    pub fn depth(&self) -> usize {
        self.roots.iter().map(ServiceNode::depth).max().unwrap_or(0)
    }

    pub fn span_count(&self) -> usize {
        fn count(n: &ServiceNode) -> usize {
            let own = usize::from(n.name != ORPHAN_ROOT || !n.span_id.is_empty());
            own + n.children.iter().map(count).sum::<usize>()
        }
        self.roots.iter().map(count).sum()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ReconstructError {
    #[error("duplicate span id {0}")]
    DuplicateSpan(String),
    #[error("span {span_id} belongs to trace {found}, expected {expected}")]
    MixedTrace {
        span_id: String,
        expected: String,
        found: String,
    },
    #[error("parent links form a cycle through span {0}")]
    Cycle(String),
}

/// Links spans by `parent_span_id`. Children are ordered by start time, then
/// span id.
pub fn reconstruct_service_tree(spans: &[SpanRecord]) -> Result<ServiceTree, ReconstructError> {
    let trace_id = spans.first().map(|s| s.trace_id.clone()).unwrap_or_default();
    let mut by_id: HashMap<&str, &SpanRecord> = HashMap::with_capacity(spans.len());
    for s in spans {
        if s.trace_id != trace_id {
            return Err(ReconstructError::MixedTrace {
                span_id: s.span_id.clone(),
                expected: trace_id,
                found: s.trace_id.clone(),
            });
        }
        if by_id.insert(&s.span_id, s).is_some() {
            return Err(ReconstructError::DuplicateSpan(s.span_id.clone()));
        }
    }

    let mut children: HashMap<&str, Vec<&SpanRecord>> = HashMap::new();
    let mut roots = Vec::new();
    let mut orphans = Vec::new();
    for s in spans {
        if s.parent_span_id.is_empty() {
            roots.push(s);
        } else if by_id.contains_key(s.parent_span_id.as_str()) {
            children.entry(s.parent_span_id.as_str()).or_default().push(s);
        } else {
            orphans.push(s);
        }
    }

    let mut placed = 0usize;
    let mut build = |s: &SpanRecord, orphan: bool| build_node(s, orphan, &children, &mut placed);
    let mut root_nodes: Vec<ServiceNode> = sorted(roots).into_iter().map(|s| build(s, false)).collect();
    if !orphans.is_empty() {
        root_nodes.push(ServiceNode {
            span_id: String::new(),
            service: String::new(),
            name: ORPHAN_ROOT.to_string(),
            start_us: orphans.iter().map(|s| s.start_us).min().unwrap_or(0),
            end_us: orphans.iter().map(|s| s.end_us).max().unwrap_or(0),
            orphan: true,
            children: sorted(orphans).into_iter().map(|s| build(s, true)).collect(),
        });
    }

    if placed != spans.len() {
        // Every span not reachable from a root or an orphan sits on a cycle.
        let mut reached = std::collections::HashSet::new();
        fn mark<'a>(n: &'a ServiceNode, reached: &mut std::collections::HashSet<&'a str>) {
            reached.insert(n.span_id.as_str());
            for c in &n.children {
                mark(c, reached);
            }
        }
        for r in &root_nodes {
            mark(r, &mut reached);
        }
        let stuck = spans
            .iter()
            .map(|s| s.span_id.as_str())
            .filter(|id| !reached.contains(id))
            .min()
            .unwrap_or_default();
        return Err(ReconstructError::Cycle(stuck.to_string()));
    }

    Ok(ServiceTree {
        trace_id,
        roots: root_nodes,
    })
}

fn sorted(mut spans: Vec<&SpanRecord>) -> Vec<&SpanRecord> {
    spans.sort_by(|a, b| (a.start_us, &a.span_id).cmp(&(b.start_us, &b.span_id)));
    spans
}

fn build_node(
    s: &SpanRecord,
    orphan: bool,
    children: &HashMap<&str, Vec<&SpanRecord>>,
    placed: &mut usize,
) -> ServiceNode {
    *placed += 1;
    let kids = children
        .get(s.span_id.as_str())
        .map(|v| sorted(v.clone()))
        .unwrap_or_default();
    ServiceNode {
        span_id: s.span_id.clone(),
        service: s.service.clone(),
        name: s.name.clone(),
        start_us: s.start_us,
        end_us: s.end_us,
        orphan,
        children: kids
            .into_iter()
            .map(|c| build_node(c, false, children, placed))
            .collect(),
    }
}
