use std::fmt::Write;
use std::str::FromStr;

use super::{compute_overhead_percent, HiQTree, TreeNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RenderFormat {
    #[default]
    Absolute,
    Percent,
}

impl FromStr for RenderFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "absolute" => Ok(RenderFormat::Absolute),
            "percent" => Ok(RenderFormat::Percent),
            other => Err(format!(
                "unknown render format \"{other}\" (expected absolute or percent)"
            )),
        }
    }
}

/// Rounds to 3 decimals and trims trailing zeros: `0.00407` → `"0.004"`.
pub fn format_number(v: f64) -> String {
    let mut s = format!("{v:.3}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

pub fn format_percent(p: f64) -> String {
    format_number(p)
}

/// The `OH:` figure, e.g. `163us(0.004%)`.
pub fn format_overhead(tree: &HiQTree) -> String {
    let pct = match tree.overhead_percent() {
        Ok(p) => format!("{}%", format_percent(p)),
        Err(_) => "n/a".to_string(),
    };
    format!("{}us({})", tree.overhead_us, pct)
}

/// One line per node, two spaces of indent per depth. The line after the root
/// carries the whole-tree overhead.
pub fn render_tree(tree: &HiQTree, format: RenderFormat) -> String {
    let root_span = tree.root.span();
    let mut out = String::new();
    for (depth, node) in tree.root.walk() {
        let indent = "  ".repeat(depth);
        let value = match format {
            RenderFormat::Absolute => format!("{}{}", format_number(node.span()), tree.metric.unit()),
            RenderFormat::Percent => percent_of(node, root_span),
        };
        let flag = if node.error_flag { " (error)" } else { "" };
        let _ = writeln!(out, "{indent}{}: {value}{flag}", node.name);
        if depth == 0 {
            let _ = writeln!(out, "  OH: {}", format_overhead(tree));
        }
    }
    out
}

fn percent_of(node: &TreeNode, root_span: f64) -> String {
    match compute_overhead_percent(node.span(), root_span) {
        Ok(p) => format!("{}%", p.round() as i64),
        Err(_) => "n/a".to_string(),
    }
}
