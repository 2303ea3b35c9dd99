//! Function approximation: small dense networks with hand-written backprop,
//! optimizers, gradient verification and named-tensor export.

mod gradcheck;
mod mlp;
mod optim;
mod tensors;

pub use gradcheck::grad_check;
pub use mlp::{
    time_conditioned_input, time_conditioned_input_with, timestep_embedding, Activation, FinalActivation, Init, Mlp, MlpSpec,
    Tape, TIME_EMBED_DIM,
};
pub use optim::{Optimizer, OptimizerKind, OptimizerSpec};
pub use tensors::{Checkpointable, Tensor, TensorMap};
