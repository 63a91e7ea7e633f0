//! Dense-network substrate: matrices, layers, forward/backward, SGD and losses.

mod dataset;
mod grad;
pub mod loss;
mod matrix;
mod model;

pub use dataset::{Dataset, Split};
pub use grad::{backward, backward_from_output, sgd_step, Gradients, LayerGrads};
pub use loss::{kl_div, loss, softmax_temp, LossKind, Targets};
pub use matrix::Matrix;
pub use model::{
    Activation, Adapter, DenseLayer, ForwardCache, LowRank, Model, FULL_PRECISION_BITS, VALID_BITS,
};
