//! A late-binding module runtime.
//!
//! Target code registers its functions in named modules and classes and calls
//! them by name through the [`Runtime`]. Every call resolves the attribute at
//! call time, so rebinding an attribute slot (what the interceptor does)
//! changes which body runs without touching the target code itself.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::sync::{Arc, Mutex, RwLock};

pub use serde_json::Value;

/// An error raised by target code. Travels through wrappers untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raised {
    pub kind: String,
    pub message: String,
}

impl Raised {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        Raised {
            kind: kind.into(),
            message: message.into(),
        }
    }

    /// A request to terminate the process with `code`.
    pub fn system_exit(code: i32) -> Self {
        Raised::new("SystemExit", code.to_string())
    }

    pub fn exit_code(&self) -> Option<i32> {
        if self.kind == "SystemExit" {
            self.message.parse().ok()
        } else {
            None
        }
    }
}

impl fmt::Display for Raised {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for Raised {}

pub type CallResult = Result<Value, Raised>;

type Body = dyn Fn(&Runtime, &[Value]) -> CallResult + Send + Sync;

/// Visible signature metadata of a function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionMeta {
    pub name: String,
    pub qualname: String,
    pub module: String,
    pub params: Vec<String>,
    pub doc: Option<String>,
}

struct FunctionInner {
    meta: FunctionMeta,
    body: Box<Body>,
}

/// A callable value. Cloning shares the same function object; identity is
/// compared with [`Function::same`].
#[derive(Clone)]
pub struct Function {
    inner: Arc<FunctionInner>,
}

impl Function {
    pub fn new<F>(meta: FunctionMeta, body: F) -> Self
    where
        F: Fn(&Runtime, &[Value]) -> CallResult + Send + Sync + 'static,
    {
        Function {
            inner: Arc::new(FunctionInner {
                meta,
                body: Box::new(body),
            }),
        }
    }

    #[inline]
    pub fn call(&self, rt: &Runtime, args: &[Value]) -> CallResult {
        (self.inner.body)(rt, args)
    }

    pub fn meta(&self) -> &FunctionMeta {
        &self.inner.meta
    }

    pub fn same(&self, other: &Function) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl fmt::Debug for Function {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "<function {} at {:p}>",
            self.inner.meta.qualname,
            Arc::as_ptr(&self.inner)
        )
    }
}

/// What an attribute slot can hold.
#[derive(Debug, Clone)]
pub enum Attr {
    Function(Function),
    Class(Arc<Namespace>),
    Value(Value),
}

impl Attr {
    pub fn as_function(&self) -> Option<&Function> {
        match self {
            Attr::Function(f) => Some(f),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NamespaceKind {
    Module,
    Class,
}

/// A module or class: a named table of attribute slots.
pub struct Namespace {
    kind: NamespaceKind,
    module: String,
    qualname: String,
    attrs: RwLock<HashMap<String, Attr>>,
}

impl Namespace {
    fn new(kind: NamespaceKind, module: &str, qualname: &str) -> Self {
        Namespace {
            kind,
            module: module.to_string(),
            qualname: qualname.to_string(),
            attrs: RwLock::new(HashMap::new()),
        }
    }

    pub fn kind(&self) -> NamespaceKind {
        self.kind
    }

    /// Dotted name: the module path, or `module.Class` for classes.
    pub fn qualname(&self) -> &str {
        &self.qualname
    }

    pub fn module_name(&self) -> &str {
        &self.module
    }

    pub fn get(&self, attr: &str) -> Option<Attr> {
        self.attrs.read().unwrap().get(attr).cloned()
    }

    /// Rebinds `attr`, returning what it held before.
    pub fn set(&self, attr: &str, value: Attr) -> Option<Attr> {
        self.attrs.write().unwrap().insert(attr.to_string(), value)
    }

    /// Rebinds `attr` only if it currently holds `expected`. Returns whether
    /// the swap happened.
    pub fn replace_function(&self, attr: &str, expected: &Function, new: Function) -> bool {
        let mut attrs = self.attrs.write().unwrap();
        match attrs.get(attr) {
            Some(Attr::Function(current)) if current.same(expected) => {
                attrs.insert(attr.to_string(), Attr::Function(new));
                true
            }
            _ => false,
        }
    }

    pub fn attr_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.attrs.read().unwrap().keys().cloned().collect();
        names.sort();
        names
    }

    /// Defines a function attribute.
    pub fn def<F>(&self, name: &str, params: &[&str], body: F) -> Function
    where
        F: Fn(&Runtime, &[Value]) -> CallResult + Send + Sync + 'static,
    {
        let meta = FunctionMeta {
            name: name.to_string(),
            qualname: format!("{}.{}", self.qualname, name),
            module: self.module.clone(),
            params: params.iter().map(|p| p.to_string()).collect(),
            doc: None,
        };
        let f = Function::new(meta, body);
        self.set(name, Attr::Function(f.clone()));
        f
    }

    /// Defines (or returns the existing) nested class namespace.
    pub fn class(&self, name: &str) -> Arc<Namespace> {
        if let Some(Attr::Class(c)) = self.get(name) {
            return c;
        }
        let class = Arc::new(Namespace::new(
            NamespaceKind::Class,
            &self.module,
            &format!("{}.{}", self.qualname, name),
        ));
        self.set(name, Attr::Class(class.clone()));
        class
    }

    pub fn value(&self, name: &str, value: Value) {
        self.set(name, Attr::Value(value));
    }
}

impl fmt::Debug for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            NamespaceKind::Module => "module",
            NamespaceKind::Class => "class",
        };
        write!(f, "<{} {}>", kind, self.qualname)
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ImportError {
    #[error("no module named '{0}'")]
    NotFound(String),
}

type Loader = Arc<dyn Fn(&Namespace) + Send + Sync>;

/// The module table target code runs against, plus its standard output.
pub struct Runtime {
    loaders: RwLock<HashMap<String, Loader>>,
    modules: RwLock<HashMap<String, Arc<Namespace>>>,
    out: Mutex<Box<dyn Write + Send>>,
}

impl Default for Runtime {
    fn default() -> Self {
        Runtime::new()
    }
}

impl Runtime {
    /// A runtime writing target output to the process's standard output.
    pub fn new() -> Self {
        Runtime::with_output(Box::new(std::io::stdout()))
    }

    pub fn with_output(out: Box<dyn Write + Send>) -> Self {
        Runtime {
            loaders: RwLock::new(HashMap::new()),
            modules: RwLock::new(HashMap::new()),
            out: Mutex::new(out),
        }
    }

    /// Makes `name` importable. The loader runs on first import.
    pub fn register_module<F>(&self, name: &str, loader: F)
    where
        F: Fn(&Namespace) + Send + Sync + 'static,
    {
        self.loaders.write().unwrap().insert(name.to_string(), Arc::new(loader));
    }

    pub fn is_loaded(&self, name: &str) -> bool {
        self.modules.read().unwrap().contains_key(name)
    }

    pub fn import(&self, name: &str) -> Result<Arc<Namespace>, ImportError> {
        if let Some(m) = self.modules.read().unwrap().get(name) {
            return Ok(m.clone());
        }
        let loader = self
            .loaders
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| ImportError::NotFound(name.to_string()))?;
        // The loader may import other modules, so no lock is held while it runs.
        let module = Arc::new(Namespace::new(NamespaceKind::Module, name, name));
        loader(&module);
        let mut modules = self.modules.write().unwrap();
        Ok(modules.entry(name.to_string()).or_insert(module).clone())
    }

    /// Calls `module.function` with late binding.
    pub fn call(&self, module: &str, function: &str, args: &[Value]) -> CallResult {
        let ns = self
            .import(module)
            .map_err(|e| Raised::new("ImportError", e.to_string()))?;
        let f = lookup_function(&ns, function)?;
        f.call(self, args)
    }

    /// Calls `module.Class.method` with late binding.
    pub fn call_method(&self, module: &str, class: &str, method: &str, args: &[Value]) -> CallResult {
        let ns = self
            .import(module)
            .map_err(|e| Raised::new("ImportError", e.to_string()))?;
        let class_ns = match ns.get(class) {
            Some(Attr::Class(c)) => c,
            _ => {
                return Err(Raised::new(
                    "AttributeError",
                    format!("module '{module}' has no class '{class}'"),
                ))
            }
        };
        let f = lookup_function(&class_ns, method)?;
        f.call(self, args)
    }

    /// Writes to the target's standard output.
    pub fn print(&self, text: &str) {
        let mut out = self.out.lock().unwrap();
        let _ = out.write_all(text.as_bytes());
        let _ = out.write_all(b"\n");
    }

    pub fn flush_output(&self) {
        let _ = self.out.lock().unwrap().flush();
    }
}

fn lookup_function(ns: &Namespace, name: &str) -> Result<Function, Raised> {
    match ns.get(name) {
        Some(Attr::Function(f)) => Ok(f),
        Some(_) => Err(Raised::new(
            "TypeError",
            format!("'{}.{}' is not callable", ns.qualname(), name),
        )),
        None => Err(Raised::new(
            "AttributeError",
            format!("'{}' has no attribute '{}'", ns.qualname(), name),
        )),
    }
}

/// A `Write` handle over a shared byte buffer, for capturing target output.
#[derive(Clone, Default)]
pub struct SharedBuffer(Arc<Mutex<Vec<u8>>>);

impl SharedBuffer {
    pub fn new() -> Self {
        SharedBuffer::default()
    }

    pub fn contents(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }
}

impl Write for SharedBuffer {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}
