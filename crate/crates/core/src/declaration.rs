//! The declarative description of what to trace, and resolution of each
//! entry to the attribute slot that will be rebound.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::runtime::{Attr, Function, Namespace, Runtime};

/// One function to intercept, labelled with the node name it gets in trees.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct TraceTarget {
    pub name: String,
    pub module: String,
    pub function: String,
    #[serde(rename = "class")]
    pub class_name: String,
}

impl TraceTarget {
    pub fn new(name: &str, module: &str, function: &str, class_name: &str) -> Self {
        TraceTarget {
            name: name.to_string(),
            module: module.to_string(),
            function: function.to_string(),
            class_name: class_name.to_string(),
        }
    }

    /// The (module, class, function) triple identifying the attribute slot.
    pub fn site_key(&self) -> (&str, &str, &str) {
        (&self.module, &self.class_name, &self.function)
    }

    pub fn qualified(&self) -> String {
        if self.class_name.is_empty() {
            format!("{}.{}", self.module, self.function)
        } else {
            format!("{}.{}.{}", self.module, self.class_name, self.function)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeclarationSource {
    File(PathBuf),
    Inline,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Declaration {
    pub targets: Vec<TraceTarget>,
    pub source: DeclarationSource,
}

#[derive(Debug, thiserror::Error)]
pub enum DeclarationError {
    #[error("malformed declaration JSON at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("declaration must be a JSON array of target objects")]
    NotAnArray,
    #[error("entry {index}: expected an object")]
    EntryNotObject { index: usize },
    #[error("entry {index}: missing required key \"{key}\"")]
    MissingKey { index: usize, key: &'static str },
    #[error("entry {index}: key \"{key}\" must be a string")]
    WrongType { index: usize, key: &'static str },
    #[error("entry {index}: key \"{key}\" must not be empty")]
    EmptyValue { index: usize, key: &'static str },
    #[error("entry {index}: nested class path \"{class}\" is not supported")]
    NestedClass { index: usize, class: String },
    #[error("entries {first} and {second} share the name \"{name}\"")]
    DuplicateName { name: String, first: usize, second: usize },
    #[error("entries {first} and {second} both target {site}")]
    DuplicateTarget { site: String, first: usize, second: usize },
    #[error("cannot read declaration {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

const KNOWN_KEYS: [&str; 4] = ["name", "module", "function", "class"];

impl Declaration {
    /// Parses the JSON form: an array of `{"name","module","function","class"}`
    /// objects. `class` may be omitted and defaults to the empty string.
    pub fn parse(text: &str) -> Result<Declaration, DeclarationError> {
        Self::parse_with_source(text, DeclarationSource::Inline)
    }

    pub fn from_file(path: &Path) -> Result<Declaration, DeclarationError> {
        let text = std::fs::read_to_string(path).map_err(|source| DeclarationError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_with_source(&text, DeclarationSource::File(path.to_path_buf()))
    }

    pub fn parse_with_source(text: &str, source: DeclarationSource) -> Result<Declaration, DeclarationError> {
        let value: Value = serde_json::from_str(text).map_err(|e| DeclarationError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let entries = value.as_array().ok_or(DeclarationError::NotAnArray)?;

        let mut targets = Vec::with_capacity(entries.len());
        let mut names: HashMap<String, usize> = HashMap::new();
        let mut sites: HashMap<(String, String, String), usize> = HashMap::new();

        for (index, entry) in entries.iter().enumerate() {
            let obj = entry.as_object().ok_or(DeclarationError::EntryNotObject { index })?;
            for key in obj.keys() {
                if !KNOWN_KEYS.contains(&key.as_str()) {
                    tracing::warn!(entry = index, key = %key, "ignoring unknown declaration key");
                }
            }
            let name = required(obj, index, "name")?;
            let module = required(obj, index, "module")?;
            let function = required(obj, index, "function")?;
            let class_name = match obj.get("class") {
                None | Some(Value::Null) => String::new(),
                Some(Value::String(s)) => s.clone(),
                Some(_) => return Err(DeclarationError::WrongType { index, key: "class" }),
            };
            if class_name.contains('.') {
                return Err(DeclarationError::NestedClass {
                    index,
                    class: class_name,
                });
            }

            if let Some(&first) = names.get(&name) {
                return Err(DeclarationError::DuplicateName {
                    name,
                    first,
                    second: index,
                });
            }
            let key = (module.clone(), class_name.clone(), function.clone());
            if let Some(&first) = sites.get(&key) {
                let target = TraceTarget::new(&name, &module, &function, &class_name);
                return Err(DeclarationError::DuplicateTarget {
                    site: target.qualified(),
                    first,
                    second: index,
                });
            }
            names.insert(name.clone(), index);
            sites.insert(key, index);
            targets.push(TraceTarget {
                name,
                module,
                function,
                class_name,
            });
        }

        Ok(Declaration { targets, source })
    }

    /// Serializes back to the canonical JSON form (with explicit `class`).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.targets).expect("targets serialize")
    }

    pub fn get(&self, name: &str) -> Option<&TraceTarget> {
        self.targets.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

fn required(obj: &Map<String, Value>, index: usize, key: &'static str) -> Result<String, DeclarationError> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(DeclarationError::MissingKey { index, key }),
        Some(Value::String(s)) if s.is_empty() => Err(DeclarationError::EmptyValue { index, key }),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(DeclarationError::WrongType { index, key }),
    }
}

/// The attribute slot where a wrapper gets bound: a module or class plus the
/// attribute name.
#[derive(Clone)]
pub struct Site {
    pub owner: Arc<Namespace>,
    pub attr: String,
}

impl Site {
    pub fn current(&self) -> Option<Attr> {
        self.owner.get(&self.attr)
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, \"{}\")", self.owner.qualname(), self.attr)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.owner.qualname(), self.attr)
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedTarget {
    pub target: TraceTarget,
    pub site: Site,
    pub original: Function,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ResolveError {
    #[error("module {0} is not importable")]
    ModuleNotFound(String),
    #[error("{attr} not found in {owner}")]
    AttributeNotFound { attr: String, owner: String },
    #[error("{attr} in {owner} is not a class")]
    NotAClass { attr: String, owner: String },
    #[error("{attr} in {owner} is not callable")]
    NotCallable { attr: String, owner: String },
    #[error("nested class path {0} is not supported")]
    NestedClass(String),
}

/// Looks up the original callable for `target`, importing its module if
/// needed. Never modifies the module.
pub fn resolve_target(target: &TraceTarget, rt: &Runtime) -> Result<ResolvedTarget, ResolveError> {
    let module = rt
        .import(&target.module)
        .map_err(|_| ResolveError::ModuleNotFound(target.module.clone()))?;
    let owner = if target.class_name.is_empty() {
        module
    } else {
        if target.class_name.contains('.') {
            return Err(ResolveError::NestedClass(target.class_name.clone()));
        }
        match module.get(&target.class_name) {
            Some(Attr::Class(c)) => c,
            Some(_) => {
                return Err(ResolveError::NotAClass {
                    attr: target.class_name.clone(),
                    owner: target.module.clone(),
                })
            }
            None => {
                return Err(ResolveError::AttributeNotFound {
                    attr: target.class_name.clone(),
                    owner: target.module.clone(),
                })
            }
        }
    };
    let original = match owner.get(&target.function) {
        Some(Attr::Function(f)) => f,
        Some(_) => {
            return Err(ResolveError::NotCallable {
                attr: target.function.clone(),
                owner: owner.qualname().to_string(),
            })
        }
        None => {
            return Err(ResolveError::AttributeNotFound {
                attr: target.function.clone(),
                owner: owner.qualname().to_string(),
            })
        }
    };
    Ok(ResolvedTarget {
        target: target.clone(),
        site: Site {
            owner,
            attr: target.function.clone(),
        },
        original,
    })
}
