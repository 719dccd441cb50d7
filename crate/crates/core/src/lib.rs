//! Per-example gradient engine for differentially private SGD.
//!
//! Models are traced into a static graph of primitive ops. From that graph
//! the crate derives reverse-mode gradients, a batched (vectorized) version
//! of any per-example program, several per-example gradient strategies,
//! and an optimized execution plan (dead-node pruning, elementwise fusion,
//! buffer reuse). The [`dpsgd`] module clips, noises and applies them; the
//! [`harness`] module times everything.

pub mod autodiff;
pub mod dpsgd;
pub mod element;
pub mod error;
pub mod exec;
pub mod graph;
pub mod harness;
pub mod models;
pub mod ops;
pub mod optimize;
pub mod rng;
pub mod strategies;
pub mod tensor;
pub mod verify;
pub mod vmap;

pub use element::Element;
pub use error::{Error, Result};
pub use graph::{Emitter, Graph, NodeId};
pub use models::{Model, ModelKind};
pub use ops::Op;
pub use rng::RngState;
pub use strategies::{PerExampleGrads, Strategy};
pub use tensor::Tensor;
