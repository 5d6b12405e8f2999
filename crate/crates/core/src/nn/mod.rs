//! Autodiff, layers, optimizer, and checkpoint plumbing shared by the three
//! trained networks.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use gradcheck::max_rel_grad_error;
pub use graph::{Gradients, Graph, Tensor};
pub use layers::{Conv1d, Conv2d, Gru, Linear, TimeNorm};
pub use params::{Binding, ParamId, ParamSet};
