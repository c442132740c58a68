//! Declarative, non-intrusive function tracing.
//!
//! A [`declaration::Declaration`] names the functions to intercept. The
//! [`interceptor::Tracer`] rebinds each named attribute in a
//! [`runtime::Runtime`] to a wrapper that samples the selected metrics, builds
//! one call tree per metric on the calling thread, and measures its own cost.
//! Finished trees flow into a bounded [`registry::TreeRegistry`] and are
//! shipped to sinks by a background worker. The [`control`] module lets an
//! operator retune all of this on a live process.

pub mod control;
pub mod declaration;
pub mod interceptor;
pub mod metrics;
pub mod registry;
pub mod runtime;
pub mod tree;

pub use control::{ControlBlock, ControlReader};
pub use declaration::{Declaration, TraceTarget};
pub use interceptor::{Installation, Tracer};
pub use metrics::{MetricKind, MetricProvider, ProviderRegistry};
pub use registry::{Pipeline, RegistryConfig, TreeBatch, TreeRegistry};
pub use runtime::{Raised, Runtime, Value};
pub use tree::{HiQTree, RenderFormat, SpanRecord, TreeNode};
