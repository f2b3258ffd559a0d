//! Layers and the MobileNet-V3-style classifier.

pub(crate) mod functional;
pub(crate) mod kernels;
mod model;

pub use functional::{softmax, BatchStats, Mode, RunningStats};
pub use kernels::Activation;
pub use model::{
    se_width, BlockSpec, Forward, Model, ModelConfig, ModelError, NormBuffer, Param, BN_EPSILON, BN_MOMENTUM,
    LAST_CONV_TAG, SE_REDUCE_RATIO,
};
