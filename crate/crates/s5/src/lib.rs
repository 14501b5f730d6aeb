//! S5 state-space network over tokenized messages and volume images, with
//! hand-written backpropagation, Adam training and checkpointing.

pub mod checkpoint;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod scalar;
pub mod ssm;
pub mod train;
