//! Graph neural networks, parameter storage and optimisation.

mod net;
mod params;

pub use net::{actor_forward, critic_forward, ForwardTrace, GraphNet, Head, InputGrads, NetShape, Upstream};
pub use params::{read_checkpoint, soft_update, write_checkpoint, Adam, ParamStore, Tensor};
