//! Path-composed modular language models.
//!
//! A base transformer's parameters are partitioned into levels; each level
//! holds one or more interchangeable modules, and a path picks one module
//! per level. Documents are routed coarsely (once, from a prefix feature)
//! to paths, each path is trained locally for a number of inner steps, and
//! module copies are reconciled by a per-module outer optimizer. The
//! [`harness`] runs the same algorithm through a simulated task queue,
//! worker pool and sharded outer executors with fault injection.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod harness;
pub mod io;
pub mod model;
pub mod modular;
pub mod optim;
pub mod params;
pub mod routing;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{LmConfig, Token};
pub use modular::{ModularConfig, ModuleKey, ModuleStore, PathId, PathSource};
pub use params::ParamTree;
pub use tensor::Tensor;
