//! Minimal neural-network toolkit: tape autodiff, parameters, optimizer.

pub mod optim;
pub mod params;
pub mod tape;

pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Graph, Mat, Var};
