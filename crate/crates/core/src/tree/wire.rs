//! JSON wire form of a tree:
//!
//! `{"tree_id","metric","unit","overhead_us","process_id","thread_id",
//!   "created_at_us","concise","root"}` with
//! `node = {"name","start","end","error","extra","children"}`.

use std::collections::BTreeMap;

use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};

use super::{HiQTree, TreeNode};
use crate::metrics::MetricKind;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed tree JSON: {0}")]
    Syntax(String),
    #[error("invalid tree field \"{field}\": {reason}")]
    Field { field: String, reason: String },
}

impl WireError {
    /// The offending field path, if the error is a schema violation.
    pub fn field(&self) -> Option<&str> {
        match self {
            WireError::Field { field, .. } => Some(field),
            WireError::Syntax(_) => None,
        }
    }
}

struct WireNode<'a>(&'a TreeNode);

impl Serialize for WireNode<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let n = self.0;
        let mut map = serializer.serialize_map(Some(6))?;
        map.serialize_entry("name", &n.name)?;
        map.serialize_entry("start", &n.start)?;
        map.serialize_entry("end", &n.end)?;
        map.serialize_entry("error", &n.error_flag)?;
        map.serialize_entry("extra", &n.extra)?;
        map.serialize_entry("children", &WireChildren(&n.children))?;
        map.end()
    }
}

struct WireChildren<'a>(&'a [TreeNode]);

impl Serialize for WireChildren<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.0.len()))?;
        for c in self.0 {
            seq.serialize_element(&WireNode(c))?;
        }
        seq.end()
    }
}

impl Serialize for HiQTree {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(9))?;
        map.serialize_entry("tree_id", &self.tree_id)?;
        map.serialize_entry("metric", self.metric.name())?;
        map.serialize_entry("unit", self.metric.unit())?;
        map.serialize_entry("overhead_us", &self.overhead_us)?;
        map.serialize_entry("process_id", &self.process_id)?;
        map.serialize_entry("thread_id", &self.thread_id)?;
        map.serialize_entry("created_at_us", &self.created_at_us)?;
        map.serialize_entry("concise", &self.concise)?;
        map.serialize_entry("root", &WireNode(&self.root))?;
        map.end()
    }
}

pub fn tree_to_wire(tree: &HiQTree) -> String {
    serde_json::to_string(tree).expect("tree serializes")
}

pub fn tree_to_wire_value(tree: &HiQTree) -> Value {
    serde_json::to_value(tree).expect("tree serializes")
}

pub fn wire_to_tree(text: &str) -> Result<HiQTree, WireError> {
    let mut de = serde_json::Deserializer::from_str(text);
    de.disable_recursion_limit();
    let value = Value::deserialize(&mut de).map_err(|e| WireError::Syntax(e.to_string()))?;
    de.end().map_err(|e| WireError::Syntax(e.to_string()))?;
    wire_value_to_tree(&value)
}

pub fn wire_value_to_tree(value: &Value) -> Result<HiQTree, WireError> {
    let obj = value.as_object().ok_or_else(|| field_err("", "expected an object"))?;
    let metric = str_field(obj, "metric", "metric")?;
    let unit = str_field(obj, "unit", "unit")?;
    Ok(HiQTree {
        tree_id: str_field(obj, "tree_id", "tree_id")?,
        metric: MetricKind::from_wire(&metric, &unit),
        overhead_us: u64_field(obj, "overhead_us", "overhead_us")?,
        process_id: u32::try_from(u64_field(obj, "process_id", "process_id")?)
            .map_err(|_| field_err("process_id", "out of range"))?,
        thread_id: u64_field(obj, "thread_id", "thread_id")?,
        created_at_us: u64_field(obj, "created_at_us", "created_at_us")?,
        concise: bool_field(obj, "concise", "concise")?,
        root: decode_node(
            obj.get("root").ok_or_else(|| field_err("root", "missing"))?,
            "root".to_string(),
        )?,
    })
}

fn decode_node(value: &Value, path: String) -> Result<TreeNode, WireError> {
    let obj = value
        .as_object()
        .ok_or_else(|| field_err(&path, "expected an object"))?;
    let at = |key: &str| format!("{path}.{key}");
    let extra = match obj.get("extra") {
        None => return Err(field_err(&at("extra"), "missing")),
        Some(Value::Object(m)) => {
            let mut extra = BTreeMap::new();
            for (k, v) in m {
                let s = v
                    .as_str()
                    .ok_or_else(|| field_err(&format!("{path}.extra.{k}"), "expected a string"))?;
                extra.insert(k.clone(), s.to_string());
            }
            extra
        }
        Some(_) => return Err(field_err(&at("extra"), "expected an object")),
    };
    let children = match obj.get("children") {
        None => return Err(field_err(&at("children"), "missing")),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, c)| decode_node(c, format!("{path}.children[{i}]")))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(field_err(&at("children"), "expected an array")),
    };
    Ok(TreeNode {
        name: str_field(obj, "name", &at("name"))?,
        start: f64_field(obj, "start", &at("start"))?,
        end: f64_field(obj, "end", &at("end"))?,
        error_flag: bool_field(obj, "error", &at("error"))?,
        extra,
        children,
    })
}

fn field_err(field: &str, reason: &str) -> WireError {
    WireError::Field {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

fn get<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, WireError> {
    obj.get(key).ok_or_else(|| field_err(path, "missing"))
}

fn str_field(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, WireError> {
    get(obj, key, path)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| field_err(path, "expected a string"))
}

fn u64_field(obj: &Map<String, Value>, key: &str, path: &str) -> Result<u64, WireError> {
    get(obj, key, path)?
        .as_u64()
        .ok_or_else(|| field_err(path, "expected a non-negative integer"))
}

fn f64_field(obj: &Map<String, Value>, key: &str, path: &str) -> Result<f64, WireError> {
    get(obj, key, path)?
        .as_f64()
        .ok_or_else(|| field_err(path, "expected a number"))
}

fn bool_field(obj: &Map<String, Value>, key: &str, path: &str) -> Result<bool, WireError> {
    get(obj, key, path)?
        .as_bool()
        .ok_or_else(|| field_err(path, "expected a boolean"))
}
