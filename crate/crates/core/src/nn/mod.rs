//! A small reverse-mode autograd engine for NCHW image networks.
//!
//! Single-threaded and allocation-simple; every operation is deterministic,
//! so identical inputs give bit-identical outputs and gradients. The engine
//! is generic over [`Real`] so gradient checks can run in `f64` while
//! training uses `f32`.

mod conv;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Shape, Tensor};
