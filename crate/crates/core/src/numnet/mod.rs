//! Dense numerics and a small feed-forward network with batch normalization.

mod gradcheck;
mod matrix;
mod network;

pub use gradcheck::{check_matrix, check_vector, finite_diff_check, relative_error, FdReport};
pub use matrix::{argmax, cosine, dot, norm, Matrix};
pub use network::{
    backward, backward_with_input, commit_running_stats, forward, forward_train, sgd_step, softmax, Activation,
    BatchNorm, ForwardCache, ForwardOutput, LayerGrads, LayerParams, LayerSpec, LeafId, LeafKind,
    NetworkParams, NetworkSpec, ParamGrads, StatsMode, BN_EPS, DEFAULT_BN_MOMENTUM,
};
