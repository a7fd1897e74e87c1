//! Declarative convolutional-network definition, exact parameter
//! accounting, and a from-scratch 64-bit trainer with verified gradients.

mod net;
mod spec;
mod train;

pub use net::{cross_entropy, grad_check, Gradients, Mode, Model};
pub use spec::{
    check_reference_table, param_count, validate_config, Activation, LayerInfo, LayerSpec,
    ModelConfig, Shape, REFERENCE_LAYER_TABLE,
};
pub use train::{
    evaluate, evaluate_samples, train, train_samples, EpochStats, TrainConfig, TrainHistory,
};
