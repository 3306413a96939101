//! Dense networks with exact reverse-mode gradients for parameters and inputs.

pub mod adam;
pub mod checkpoint;
pub mod model;
pub mod ops;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use model::{
    he_init, he_init_with, Activation, BatchNorm, Forward, ForwardCache, Gradients, Layer,
    LayerGrads, MlpModel, Mode, ParamGrads,
};
pub use ops::{argmax, log_softmax, logsumexp, softmax, softmax_rows};
