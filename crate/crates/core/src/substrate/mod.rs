//! Decoder-only substrate: forward hooks, reverse pass, optimisers and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod grad;
pub mod optim;
pub mod params;

pub use checkpoint::{load_checkpoint, model_hash, save_checkpoint};
pub use config::ModelConfig;
pub use forward::{forward, forward_from_hidden, log_softmax, softmax, ForwardTrace, ModelState};
pub use grad::{
    loss_and_grad, ConstantObjective, DistillKl, Gradients, Objective, OffsetProblem, OffsetQuadratic, TokenNll,
    Wrt,
};
pub use optim::{sgd_step, Adam};
pub use params::Params;
